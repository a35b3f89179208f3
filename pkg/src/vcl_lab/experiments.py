"""Experiment drivers behind the command-line subcommands.

Each ``run_*`` function takes a fully resolved config dict and an output
directory, writes its data tables, and returns a report dict with a
``checks`` list and an overall ``passed`` flag.  Config parsing and exit
codes live in :mod:`vcl_lab.cli`.
"""

import copy
import csv
import json
import math
import time
from pathlib import Path

import numpy as np

from . import gmm as gm
from . import moments as mom
from .data import DataError, Dataset, load_csv, make_blobs, make_gmm2_dataset, split, standardize
from .layers import MLP, MLPSpec, load_model, save_model
from .trainer import TrainConfig, TrainingAborted, smoothed_validation_selection, train
from .vcl import VclConfig

DATA_DEFAULTS = {
    "source": "blobs",  # blobs | gmm2 | gaussian | csv
    "count": 4000,
    "classes": 4,
    "separation": 2.5,
    "std": 1.0,
    "dim": 2,
    "p": 0.25,
    "mu1": [-2.0, 0.0],
    "mu2": [2.0, 0.0],
    "path": None,
    "label_column": -1,
    "header": True,
    "seed": 0,
    "split": [0.8, 0.1, 0.1],
    "standardize": True,
}

MODEL_DEFAULTS = {
    "hidden": [64, 64, 64, 64],
    "activation": "elu",
    "dropout_rate": 0.0,
    "dropout_kind": "standard",
    "dropout_placement": "last",
}

DEFAULTS = {
    "stats-verify": {
        "seed": 0,
        "out": "runs/stats-verify",
        # "exact" or "gaussian_only"; the latter plugs kurtosis 3 into every
        # closed form and exists as a negative control.
        "formula": "exact",
        "variance": {
            "samplers": ["gaussian", "uniform", "two_point"],
            "n": [2, 5, 10, 50],
            "trials": 1000000,
            "rel_tol": 0.02,
        },
        "kurtosis": {
            "samplers": ["two_point", "gaussian", "laplace"],
            "draws": 4000000,
            "rel_tol": 0.02,
            "two_point_abs_tol": 0.01,
        },
        "coverage": {
            # "interval": (1-e)/(1+e) <= s1/s2 <= (1+e)/(1-e), the event the
            # Chebyshev argument bounds.  "squared_band": the two-sided band on
            # (1 - s1/s2)**2, which excludes ratios near 1 and is not bounded.
            "event": "interval",
            "samplers": ["gaussian", "two_point"],
            "n": [5, 20],
            "eps": [0.3, 0.5, 0.8],
            "trials": 100000,
        },
    },
    "gmm-phase": {
        "seed": 0,
        "out": "runs/gmm-phase",
        "priors": [0.1, 0.25],
        "mu1": [-2.0, 0.0],
        "mu2": [2.0, 0.0],
        "var": 1.0,
        "seeds": 10,
        "samples": 200000,
        "tolerance_deg": 8.0,
        "min_hits": 9,
        "descent": {"steps": 500, "lr": 0.5},
        "unit": {
            "n": 50,
            "beta_init": 1.0,
            "batch_size": 100,
            "epochs": 400,
            "lr_schedule": [[0, 0.01], [100, 0.003], [200, 0.001], [300, 0.0003]],
            "momentum": 0.9,
            "clip_norm": 1.0,
        },
        "isotropic_control": True,
        "min_circular_variance": 0.5,
    },
    "train": {
        "seed": 0,
        "out": "runs/train",
        "data": DATA_DEFAULTS,
        "model": MODEL_DEFAULTS,
        "normalizer": "none",
        "train": {
            "batch_size": 20,
            "epochs": 500,
            "lr_schedule": [[0, 0.01], [200, 0.001]],
            "momentum": 0.9,
            "weight_decay": 0.0001,
            "clip_norm": 1.0,
        },
        "vcl": {"n": 2, "gamma": 0.01, "beta_init": 1.0},
        "selection_mask": 10,
        "max_train_error": None,
    },
    "activation-hist": {
        "seed": 0,
        "out": "runs/activation-hist",
        "model_path": None,
        "model": MODEL_DEFAULTS,
        "data": DATA_DEFAULTS,
        "layers": None,
        "units": None,
        "bins": 30,
    },
    "bound-check": {
        "seed": 0,
        "out": "runs/bound-check",
        "model_path": None,
        "model": MODEL_DEFAULTS,
        "data": DATA_DEFAULTS,
        "layers": None,
        "units_per_layer": 16,
        "n": 20,
        "eps": [0.3, 0.5],
        "trials": 20000,
    },
}


def defaults(command: str) -> dict:
    return copy.deepcopy(DEFAULTS[command])


def _check(name, passed, **values):
    return {"name": name, "passed": bool(passed), **values}


def _write_table(path: Path, header, rows, delimiter=","):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_report(path: Path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stats-verify
# ---------------------------------------------------------------------------


def _closed_var_of_var(dist, n, formula):
    if formula == "gaussian_only":
        return mom.var_of_sample_variance(3.0 * dist.sigma2**2, dist.sigma2, n)
    return mom.var_of_sample_variance(dist.m4, dist.sigma2, n)


def _kappa(dist, formula):
    return 3.0 if formula == "gaussian_only" else dist.kurtosis


def run_stats_verify(cfg: dict, out: Path) -> dict:
    formula = cfg["formula"]
    if formula not in ("exact", "gaussian_only"):
        raise ValueError("formula must be 'exact' or 'gaussian_only'")
    seq = np.random.SeedSequence(cfg["seed"])
    checks, var_rows, cov_rows = [], [], []

    vc = cfg["variance"]
    for name in vc["samplers"]:
        dist = mom.make_sampler(name, 1.0)
        for n in vc["n"]:
            (child,) = seq.spawn(1)
            mc = mom.mc_var_of_sample_variance(dist, n, vc["trials"], child)
            closed = _closed_var_of_var(dist, n, formula)
            rel = abs(mc - closed) / closed
            ok = rel <= vc["rel_tol"]
            var_rows.append([name, n, closed, mc, rel, ok])
            checks.append(_check(f"var_of_var/{name}/n={n}", ok, closed=closed, monte_carlo=mc, rel_err=rel))

    kc = cfg["kurtosis"]
    kurts = {}
    for name in kc["samplers"]:
        dist = mom.make_sampler(name, 1.0)
        (child,) = seq.spawn(1)
        mc = mom.mc_kurtosis(dist, kc["draws"], child)
        target = _kappa(dist, formula)
        rel = abs(mc - target) / target
        ok = rel <= kc["rel_tol"]
        if name == "two_point":
            ok = ok and abs(mc - target) <= kc["two_point_abs_tol"]
        kurts[name] = (target, mc)
        checks.append(_check(f"kurtosis/{name}", ok, closed=target, monte_carlo=mc, rel_err=rel))
    if len(kurts) >= 2:
        names = sorted(kurts, key=lambda k: kurts[k][0])
        for idx in (0, 1):
            vals = [kurts[k][idx] for k in names]
            label = "closed" if idx == 0 else "monte_carlo"
            pvcl = [mom.population_vcl(v, 10) for v in vals]
            ok = all(a < b for a, b in zip(pvcl, pvcl[1:]))
            checks.append(_check(f"vcl_ordering/{label}", ok, order=names, population_vcl_n10=pvcl))

    cc = cfg["coverage"]
    coverage_fn = {"interval": mom.mc_ratio_interval_coverage, "squared_band": mom.mc_ratio_coverage}.get(cc["event"])
    if coverage_fn is None:
        raise ValueError("coverage.event must be 'interval' or 'squared_band'")
    for name in cc["samplers"]:
        dist = mom.make_sampler(name, 1.0)
        for n in cc["n"]:
            for eps in cc["eps"]:
                (child,) = seq.spawn(1)
                cov = coverage_fn(dist, n, eps, cc["trials"], child)
                bound = mom.chebyshev_bound_rhs(_kappa(dist, formula), n, eps)
                ok = cov >= bound
                cov_rows.append([name, n, eps, bound, cov, ok])
                checks.append(_check(f"coverage/{name}/n={n}/eps={eps}", ok, bound=bound, coverage=cov))

    _write_table(out / "variance.csv", ["sampler", "n", "closed", "monte_carlo", "rel_err", "passed"], var_rows)
    _write_table(out / "coverage.csv", ["sampler", "n", "eps", "bound", "coverage", "passed"], cov_rows)
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}


# ---------------------------------------------------------------------------
# gmm-phase
# ---------------------------------------------------------------------------


def _write_trajectory(path, traj: gm.DirectionTrajectory):
    d = traj.directions.shape[1]
    _write_table(path, ["step", *[f"theta{j}" for j in range(d)], "kurtosis"], traj.to_rows())


def run_gmm_phase(cfg: dict, out: Path) -> dict:
    uc = cfg["unit"]
    vcfg = VclConfig(n=uc["n"], beta_init=uc["beta_init"])
    seq = np.random.SeedSequence(cfg["seed"])
    checks, rows, priors = [], [], []
    for p in cfg["priors"]:
        g = gm.Gmm2.isotropic(p, cfg["mu1"], cfg["mu2"], cfg["var"])
        sp = gm.scatter_matrices(g)
        regime = gm.phase_regime(p)
        target = gm.lda_direction(sp) if regime is gm.Regime.SEPARATE else gm.grid_direction(sp, maximize=False)
        result = {"p": p, "regime": regime.value, "target": target.tolist(), "descent_deg": [], "unit_deg": []}
        for s in range(cfg["seeds"]):
            data_seq, init_seq, train_seq = seq.spawn(3)
            theta0 = np.random.default_rng(init_seq).normal(size=g.dim)
            traj = gm.minimize_projection_kurtosis(g, theta0, cfg["descent"]["steps"], cfg["descent"]["lr"])
            _write_trajectory(out / f"descent_p{p}_seed{s}.csv", traj)
            x = make_gmm2_dataset(g, cfg["samples"], seed=data_seq).features
            utraj = gm.train_single_unit_vcl(x, vcfg, epochs=uc["epochs"], batch_size=uc["batch_size"],
                                             lr=uc["lr_schedule"], momentum=uc["momentum"],
                                             clip_norm=uc["clip_norm"], seed=train_seq, gmm=g)
            _write_trajectory(out / f"unit_p{p}_seed{s}.csv", utraj)
            a_desc = gm.angle_deg(traj.final, target)
            a_unit = gm.angle_deg(utraj.final, target)
            result["descent_deg"].append(a_desc)
            result["unit_deg"].append(a_unit)
            rows.append([p, s, regime.value, a_desc, a_unit, float(utraj.betas[-1])])
        for method in ("descent", "unit"):
            hits = int(sum(a <= cfg["tolerance_deg"] for a in result[f"{method}_deg"]))
            checks.append(_check(f"{method}/p={p}", hits >= cfg["min_hits"], hits=hits, seeds=cfg["seeds"],
                                 regime=regime.value))
        priors.append(result)
    _write_table(out / "angles.csv", ["p", "seed", "regime", "descent_deg", "unit_deg", "final_beta"], rows)

    report = {"priors": priors}
    if cfg["isotropic_control"]:
        finals = []
        for s in range(cfg["seeds"]):
            data_seq, train_seq = seq.spawn(2)
            x = np.random.default_rng(data_seq).standard_normal((cfg["samples"], len(cfg["mu1"])))
            utraj = gm.train_single_unit_vcl(x, vcfg, epochs=uc["epochs"], batch_size=uc["batch_size"],
                                             lr=uc["lr_schedule"], momentum=uc["momentum"],
                                             clip_norm=uc["clip_norm"], seed=train_seq)
            finals.append(utraj.final)
        cv = gm.circular_variance(finals) if len(cfg["mu1"]) == 2 else math.nan
        report["isotropic_circular_variance"] = cv
        checks.append(_check("isotropic_control", cv > cfg["min_circular_variance"], circular_variance=cv))
    report["checks"] = checks
    report["passed"] = all(c["passed"] for c in checks)
    return report


# ---------------------------------------------------------------------------
# shared data / model plumbing
# ---------------------------------------------------------------------------


def build_dataset(dc: dict) -> Dataset:
    src = dc["source"]
    if src == "blobs":
        return make_blobs(dc["count"], dc["classes"], dc["separation"], dc["std"], seed=dc["seed"])
    if src == "gmm2":
        g = gm.Gmm2.isotropic(dc["p"], dc["mu1"], dc["mu2"], dc["std"] ** 2)
        return make_gmm2_dataset(g, dc["count"], seed=dc["seed"])
    if src == "gaussian":
        x = np.random.default_rng(dc["seed"]).standard_normal((dc["count"], dc["dim"]))
        return Dataset(x, np.zeros(dc["count"], dtype=np.int64), 1)
    if src == "csv":
        if not dc["path"]:
            raise DataError("data.source 'csv' needs data.path")
        return load_csv(dc["path"], dc["label_column"], dc["header"])
    raise DataError(f"unknown data source {src!r}")


def prepare_splits(dc: dict):
    """Build, split and (optionally) standardise with train-split statistics."""
    ds = build_dataset(dc)
    tr, va, te = split(ds, dc["split"], seed=dc["seed"])
    stats = None
    if dc["standardize"]:
        tr, stats = standardize(tr)
        va, _ = standardize(va, stats)
        te, _ = standardize(te, stats)
    return tr, va, te, stats


def _mlp_spec(mc: dict, n_in: int, n_out: int, normalizer: str) -> MLPSpec:
    return MLPSpec(n_in=n_in, n_out=n_out, hidden=list(mc["hidden"]), activation=mc["activation"],
                   normalizer=normalizer, dropout_rate=mc["dropout_rate"], dropout_kind=mc["dropout_kind"],
                   dropout_placement=mc["dropout_placement"])


def _model_for(cfg: dict, ds: Dataset) -> MLP:
    if cfg["model_path"]:
        model = load_model(cfg["model_path"])
        if model.spec.n_in != ds.dim:
            raise DataError(f"model expects {model.spec.n_in} features, dataset has {ds.dim}")
        return model
    return MLP(_mlp_spec(cfg["model"], ds.dim, max(ds.class_count, 1), "none"), rng=cfg["seed"])


def _select_units(model: MLP, layers, units):
    widths = [d.n_out for d in model.hidden]
    layers = list(range(len(widths))) if layers is None else list(layers)
    picks = []
    for layer in layers:
        if not 0 <= layer < len(widths):
            raise IndexError(f"layer {layer} out of range (model has {len(widths)} hidden layers)")
        chosen = range(widths[layer]) if units is None else units
        for u in chosen:
            if not 0 <= u < widths[layer]:
                raise IndexError(f"unit {u} out of range for layer {layer} of width {widths[layer]}")
            picks.append((layer, int(u)))
    return picks


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_train(cfg: dict, out: Path) -> dict:
    tr, va, _, stats = prepare_splits(cfg["data"])
    tc = cfg["train"]
    normalizer = cfg["normalizer"]
    vc = cfg["vcl"]
    tcfg = TrainConfig(batch_size=tc["batch_size"], epochs=tc["epochs"], lr_schedule=tc["lr_schedule"],
                       momentum=tc["momentum"], weight_decay=tc["weight_decay"], clip_norm=tc["clip_norm"],
                       seed=cfg["seed"], normalizer=normalizer,
                       vcl=VclConfig(vc["n"], vc["gamma"], vc["beta_init"]) if normalizer == "vcl" else None)
    model = MLP(_mlp_spec(cfg["model"], tr.dim, tr.class_count, normalizer), rng=cfg["seed"])
    t0 = time.perf_counter()
    aborted = None
    try:
        hist = train(model, tr, va if len(va) else None, tcfg)
    except TrainingAborted as exc:
        hist, aborted = exc.history, str(exc)
    elapsed = time.perf_counter() - t0
    hist.write(out / "history.tsv")
    if aborted is not None:
        return {"aborted": aborted, "epochs_completed": len(hist.records),
                "checks": [_check("training_completed", False, diagnostic=aborted)], "passed": False}
    save_model(model, out / "model.vclm")

    val = hist.column("val_err")
    if len(va) and np.all(np.isfinite(val)):
        best, smooth = smoothed_validation_selection(val, cfg["selection_mask"])
    else:
        best, smooth = len(hist.records) - 1, math.nan
    last = hist.records[-1]
    summary = {
        "selected_epoch": best,
        "smoothed_val_err": smooth,
        "selected_val_err": hist.records[best].val_err,
        "final_train_err": last.train_err,
        "final_val_err": last.val_err,
        "final_mean_kurtosis": last.mean_kurtosis,
        "total_clip_events": hist.total_clip_events,
        "seconds": elapsed,
        "standardizer": None if stats is None else {"mean": stats[0].tolist(), "std": stats[1].tolist()},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2)
    checks = [_check("training_completed", True)]
    if cfg["max_train_error"] is not None:
        checks.append(_check("train_error", last.train_err < cfg["max_train_error"],
                             train_err=last.train_err, limit=cfg["max_train_error"]))
    return {"summary": summary, "checks": checks, "passed": all(c["passed"] for c in checks)}


# ---------------------------------------------------------------------------
# activation-hist
# ---------------------------------------------------------------------------


def histogram(values: np.ndarray, bins: int):
    """``(edges, counts)``; a constant column collapses to one degenerate bin."""
    v = np.asarray(values, dtype=np.float64)
    if np.all(v == v[0]):
        return np.array([v[0], v[0]]), np.array([v.size])
    counts, edges = np.histogram(v, bins=bins)
    return edges, counts


def _safe_kurtosis(v):
    try:
        return mom.kurtosis(v)
    except mom.UndefinedKurtosis:
        return math.nan


def run_activation_hist(cfg: dict, out: Path) -> dict:
    tr, _, _, _ = prepare_splits(cfg["data"])
    model = _model_for(cfg, tr)
    picks = _select_units(model, cfg["layers"], cfg["units"])
    pre, post = model.forward_collect(tr.features)
    hist_rows, kurt_rows = [], []
    for layer, unit in picks:
        kp = _safe_kurtosis(pre[layer][:, unit])
        kq = _safe_kurtosis(post[layer][:, unit])
        kurt_rows.append([layer, unit, kp, kq])
        for view, arr in (("pre", pre[layer]), ("post", post[layer])):
            edges, counts = histogram(arr[:, unit], cfg["bins"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hist_rows.append([layer, unit, view, float(lo), float(hi), int(c)])
    _write_table(out / "histograms.csv", ["layer", "unit", "view", "bin_lo", "bin_hi", "count"], hist_rows)
    _write_table(out / "kurtosis.csv", ["layer", "unit", "pre_kurtosis", "post_kurtosis"], kurt_rows)
    pre_k = np.array([r[2] for r in kurt_rows])
    finite = pre_k[np.isfinite(pre_k)]
    return {"units": len(picks), "mean_pre_kurtosis": float(finite.mean()) if finite.size else math.nan,
            "constant_units": [[r[0], r[1]] for r in kurt_rows if not math.isfinite(r[2])],
            "checks": [], "passed": True}


# ---------------------------------------------------------------------------
# bound-check
# ---------------------------------------------------------------------------


def run_bound_check(cfg: dict, out: Path) -> dict:
    tr, _, _, _ = prepare_splits(cfg["data"])
    model = _model_for(cfg, tr)
    rng = np.random.default_rng(cfg["seed"])
    pre, _ = model.forward_collect(tr.features)
    layers = range(len(model.hidden)) if cfg["layers"] is None else cfg["layers"]
    picks = []
    for layer in layers:
        width = model.hidden[layer].n_out if 0 <= layer < len(model.hidden) else None
        if width is None:
            raise IndexError(f"layer {layer} out of range (model has {len(model.hidden)} hidden layers)")
        k = min(cfg["units_per_layer"], width)
        picks.extend((layer, int(u)) for u in np.sort(rng.choice(width, k, replace=False)))

    rows, skipped, conc = [], [], []
    violations = 0
    for layer, unit in picks:
        v = pre[layer][:, unit]
        m = mom.compute_moments(v)
        if not m.kurtosis_defined:
            skipped.append([layer, unit])
            continue
        for eps in cfg["eps"]:
            emp = mom.mc_single_variance_coverage(v, cfg["n"], eps, cfg["trials"], rng)
            bound = mom.single_variance_bound(m.kurtosis, cfg["n"], eps)
            ok = emp >= bound
            violations += not ok
            conc.append(emp)
            rows.append([layer, unit, m.kurtosis, eps, emp, bound, ok])
    _write_table(out / "bound_check.csv", ["layer", "unit", "kurtosis", "eps", "empirical", "bound", "passed"], rows)
    per_eps = {str(e): float(np.mean([r[4] for r in rows if r[3] == e])) if rows else math.nan for e in cfg["eps"]}
    kurts = [r[2] for r in rows]
    checks = [_check("bound_never_violated", violations == 0, violations=violations, tested=len(rows))]
    return {"mean_concentration": float(np.mean(conc)) if conc else math.nan,
            "mean_concentration_by_eps": per_eps,
            "mean_kurtosis": float(np.mean(kurts)) if kurts else math.nan,
            "skipped_zero_variance": skipped,
            "checks": checks, "passed": all(c["passed"] for c in checks)}


RUNNERS = {
    "stats-verify": run_stats_verify,
    "gmm-phase": run_gmm_phase,
    "train": run_train,
    "activation-hist": run_activation_hist,
    "bound-check": run_bound_check,
}
