"""Experiment configs, presets, checkpoints and the command implementations."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time

import numpy as np

from .autodiff import ParamVector
from .bayes import BayesConfig, bayes_fit
from .dynamics import DIFFUSIONS, POTENTIALS, DynamicsModel, potential_value
from .sde import GaussianMixture, SdeProblem, SnapshotDataset, generate_dataset
from .training import AdamState, LossConfig, TrainingAborted, TrainReport, fit
from .transport import TriangularMapModel, log_pullback_density

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
SNAPSHOT_TIMES = [round(0.1 * i, 10) for i in range(11)]


class InvalidConfig(ValueError):
    pass


class PreTrainRequired(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# presets

MIXTURE4 = {
    "weights": [0.25] * 4,
    "means": [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]],
    "covs": [[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 0.5]], [[0.5, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 2.0]]],
}


def _lse_preset(d: int, n: int, desk_n: int) -> dict:
    diag = [0.1 if i % 2 == 0 else 1.0 for i in range(d)]
    return {
        "dim": d,
        "data": {"n": n, "init": {"weights": [1.0], "means": [[0.0] * d], "covs": [np.eye(d).tolist()]}},
        "truth": {"potential": "lse_wells", "theta_psi": [1.0] * d + [-1.0] * d,
                  "diffusion": np.diag(diag).tolist()},
        "dynamics": {"potential": "lse_wells", "diffusion": "full"},
        "budgets": {"paper": {"loss": {"epochs": 20000}},
                    "desk": {"data": {"n": desk_n}, "loss": {"epochs": 1000}}},
    }


PRESETS = {
    "iso-quadratic-2d": {
        "dim": 2,
        "data": {"n": 1000, "init": MIXTURE4},
        "truth": {"potential": "quadratic", "theta_psi": [2.0, 3.0, -1.0, -1.0],
                  "diffusion": [[0.2, 0.0], [0.0, 0.2]]},
        "dynamics": {"potential": "quadratic", "diffusion": "isotropic"},
        "budgets": {"paper": {"loss": {"epochs": 20000}},
                    "desk": {"data": {"n": 500}, "loss": {"epochs": 10000}}},
    },
    "aniso-doublewell-2d": {
        "dim": 2,
        "data": {"n": 1000, "init": MIXTURE4},
        "truth": {"potential": "doublewell", "theta_psi": [1.0, 1.0, -1.5, -1.5],
                  "diffusion": [[0.1, 0.0], [0.0, 0.2]]},
        "dynamics": {"potential": "doublewell", "diffusion": "full"},
        "budgets": {"paper": {"loss": {"epochs": 60000}},
                    "desk": {"data": {"n": 500}, "loss": {"epochs": 30000}}},
    },
    "lse-wells-3d": _lse_preset(3, 3000, 1000),
    "lse-wells-4d": _lse_preset(4, 7000, 1000),
    "lse-wells-5d": _lse_preset(5, 3000, 1000),
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "preset": "custom",
    "budget": "paper",
    "seed": 0,
    "data": {"dt": 1e-3, "times": SNAPSHOT_TIMES},
    "map": {"hidden_layers": 5, "hidden_width": 5, "n_quad": 20},
    "dynamics": {"hidden_layers": 5, "hidden_width": 5},
    "loss": {"lam": 0.1, "batch_size": 32, "shared_batch": True},
    "bayes": {"epochs": 500},
    "report": {"times": [0.1, 0.4, 0.7], "lo": -8.0, "hi": 8.0, "resolution": 81, "plane": [0, 1]},
}


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(user: dict | None = None, overrides: dict | None = None) -> dict:
    """defaults < preset (+ budget) < config file < flag overrides."""
    user = dict(user or {})
    overrides = dict(overrides or {})
    preset = overrides.get("preset", user.get("preset", "custom"))
    budget = overrides.get("budget", user.get("budget", "paper"))
    cfg = copy.deepcopy(DEFAULTS)
    if preset != "custom":
        if preset not in PRESETS:
            raise InvalidConfig(f"preset: unknown preset {preset!r}; choose from {sorted(PRESETS)} or 'custom'")
        spec = copy.deepcopy(PRESETS[preset])
        budgets = spec.pop("budgets")
        if budget not in budgets:
            raise InvalidConfig(f"budget: must be one of {sorted(budgets)}")
        cfg = deep_merge(deep_merge(cfg, spec), budgets[budget])
    cfg = deep_merge(cfg, user)
    cfg = deep_merge(cfg, overrides)
    cfg["preset"], cfg["budget"] = preset, budget
    validate_config(cfg)
    return cfg


def _need(cfg, path):
    node = cfg
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            raise InvalidConfig(f"{path}: required field missing")
        node = node[key]
    return node


def validate_config(cfg: dict) -> None:
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfig(f"schema_version: expected {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    d = _need(cfg, "dim")
    if not isinstance(d, int) or d < 1:
        raise InvalidConfig("dim: must be a positive integer")
    if not isinstance(cfg.get("seed"), int):
        raise InvalidConfig("seed: must be an integer")
    data = cfg["data"]
    if not isinstance(_need(cfg, "data.n"), int) or data["n"] <= 0:
        raise InvalidConfig("data.n: must be a positive integer")
    if not data["dt"] > 0:
        raise InvalidConfig("data.dt: must be positive")
    times = data["times"]
    if not times or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidConfig("data.times: must start at 0 and increase strictly")
    init = _need(cfg, "data.init")
    try:
        gm = GaussianMixture(**init)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"data.init: {exc}") from exc
    if gm.dim != d:
        raise InvalidConfig(f"data.init: mixture dimension {gm.dim} does not match dim={d}")
    dyn = _need(cfg, "dynamics")
    if dyn.get("potential") not in POTENTIALS:
        raise InvalidConfig(f"dynamics.potential: must be one of {sorted(POTENTIALS)}")
    if dyn.get("diffusion") not in DIFFUSIONS:
        raise InvalidConfig(f"dynamics.diffusion: must be one of {sorted(DIFFUSIONS)}")
    truth = cfg.get("truth")
    if truth is not None:
        if truth.get("potential") not in POTENTIALS or truth["potential"] == "neural":
            raise InvalidConfig("truth.potential: must be a structured potential")
        if len(truth.get("theta_psi", [])) != POTENTIALS[truth["potential"]](d).n_params:
            raise InvalidConfig(f"truth.theta_psi: wrong length for dim={d}")
        dm = np.asarray(truth.get("diffusion"), dtype=float)
        if dm.shape != (d, d) or not np.allclose(dm, dm.T) or np.linalg.eigvalsh(dm).min() < 0:
            raise InvalidConfig(f"truth.diffusion: must be a symmetric PSD {d}x{d} matrix")
    m = cfg["map"]
    if m["n_quad"] < 2 or m["n_quad"] % 2:
        raise InvalidConfig("map.n_quad: must be an even integer >= 2")
    if m["hidden_layers"] < 0 or m["hidden_width"] < 1:
        raise InvalidConfig("map: hidden_layers >= 0 and hidden_width >= 1 required")
    try:
        loss_config(cfg)
        BayesConfig(**cfg["bayes"], seed=cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"loss/bayes: {exc}") from exc
    rep = cfg["report"]
    plane = rep["plane"]
    if d >= 2 and (len(plane) != 2 or len(set(plane)) != 2 or not all(0 <= i < d for i in plane)):
        raise InvalidConfig(f"report.plane: two distinct axes in [0, {d}) required")
    if rep["resolution"] < 2 or not rep["hi"] > rep["lo"]:
        raise InvalidConfig("report: resolution >= 2 and hi > lo required")


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**{**cfg["loss"], "seed": cfg["seed"]})


def build_models(cfg: dict) -> tuple[TriangularMapModel, DynamicsModel]:
    d = cfg["dim"]
    m = cfg["map"]
    mm = TriangularMapModel.build(d, m["hidden_layers"], m["hidden_width"], m["n_quad"])
    dyn_cfg = cfg["dynamics"]
    spec = {"potential": dyn_cfg["potential"], "diffusion": dyn_cfg["diffusion"], "dim": d,
            "hidden_layers": dyn_cfg.get("hidden_layers", 5), "hidden_width": dyn_cfg.get("hidden_width", 5),
            "init_seed": cfg["seed"]}
    return mm, DynamicsModel.from_dict(spec)


def truth_problem(cfg: dict) -> SdeProblem:
    truth = cfg.get("truth")
    if truth is None:
        raise InvalidConfig("truth: required to simulate data")
    pot = POTENTIALS[truth["potential"]](cfg["dim"])
    return SdeProblem.from_diffusion(pot, truth["theta_psi"], truth["diffusion"])


def truth_named(cfg: dict, dyn: DynamicsModel) -> dict[str, float]:
    """Ground truth expressed in the fitted model's parameter names."""
    truth = cfg["truth"]
    dmat = np.asarray(truth["diffusion"], dtype=float)
    out = {}
    if dyn.diffusion.kind == "isotropic":
        out["theta_D"] = float(np.mean(np.diag(dmat)))
    else:
        out.update({f"theta_D_{i + 1}{j + 1}": float(dmat[i, j]) for i in range(dyn.dim) for j in range(dyn.dim)})
    if dyn.potential.kind == truth["potential"]:
        out.update(zip(dyn.potential.names(), map(float, truth["theta_psi"])))
    return out


# ---------------------------------------------------------------------------
# io helpers


def dump_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json_text(obj))


def json_text(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def load_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path: str, header: list[str], rows) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else format(float(v), ".17g") for v in row])


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(cfg: dict, rep: TrainReport, mm: TriangularMapModel, dyn: DynamicsModel,
                    dataset: SnapshotDataset, status: str = "complete") -> dict:
    pts = dataset.all_points()
    return {
        "format_version": CHECKPOINT_VERSION,
        "status": status,
        "epoch": rep.epoch,
        "params": rep.params.to_dict(),
        "adam": rep.adam.to_dict(),
        "map": mm.to_dict(),
        "dynamics": dyn.to_dict(),
        "loss_config": rep.config,
        "config": cfg,
        "rng": {"scheme": "SeedSequence([seed, epoch])", "seed": cfg["seed"], "next_epoch": rep.epoch},
        "curves": {"loss": rep.loss, "nll": rep.nll, "pde": rep.pde, "theta2": rep.theta2},
        "warnings": rep.warnings,
        "data_stats": {"mean": pts.mean(axis=0).tolist(), "lo": pts.min(axis=0).tolist(),
                       "hi": pts.max(axis=0).tolist()},
    }


def save_checkpoint(path: str, ckpt: dict) -> None:
    dump_json(path, ckpt)


def load_checkpoint(path: str) -> dict:
    if not os.path.exists(path):
        raise PreTrainRequired(f"no deterministic checkpoint at {path}; run 'fit' first")
    ckpt = load_json(path)
    if ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"checkpoint format_version {ckpt.get('format_version')!r} is not supported")
    return ckpt


def report_from_checkpoint(ckpt: dict) -> TrainReport:
    c = ckpt["curves"]
    return TrainReport(ParamVector.from_dict(ckpt["params"]), AdamState.from_dict(ckpt["adam"]), ckpt["epoch"],
                       list(c["loss"]), list(c["nll"]), list(c["pde"]), list(c["theta2"]),
                       ckpt["loss_config"], list(ckpt["warnings"]))


def models_from_checkpoint(ckpt: dict) -> tuple[TriangularMapModel, DynamicsModel, ParamVector]:
    return (TriangularMapModel.from_dict(ckpt["map"]), DynamicsModel.from_dict(ckpt["dynamics"]),
            ParamVector.from_dict(ckpt["params"]))


# ---------------------------------------------------------------------------
# commands


def _timing(out: str, name: str, seconds: float) -> None:
    path = os.path.join(out, "timing.json")
    data = load_json(path) if os.path.exists(path) else {}
    data[name] = seconds
    dump_json(path, data)


def cmd_simulate(cfg: dict, out: str) -> SnapshotDataset:
    t0 = time.perf_counter()
    prob = truth_problem(cfg)
    gm = GaussianMixture(**cfg["data"]["init"])
    ds = generate_dataset(prob, gm, cfg["data"]["n"], cfg["data"]["times"], cfg["data"]["dt"], cfg["seed"])
    ds.meta["preset"] = cfg["preset"]
    ds.meta["init"] = gm.to_dict()
    ds.save(os.path.join(out, "data"))
    dump_json(os.path.join(out, "config.json"), cfg)
    _timing(out, "simulate", time.perf_counter() - t0)
    return ds


def _check_dataset(cfg: dict, ds: SnapshotDataset) -> None:
    if ds.dim != cfg["dim"]:
        raise InvalidConfig(f"dim: dataset has dimension {ds.dim}, config says {cfg['dim']}")


def _write_fit_outputs(out_dir: str, cfg, rep, mm, dyn, ds, status="complete") -> dict:
    ckpt = make_checkpoint(cfg, rep, mm, dyn, ds, status)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), ckpt)
    report = rep.to_dict()
    report["status"] = status
    dump_json(os.path.join(out_dir, "report.json"), report)
    names = list(rep.theta2[0]) if rep.theta2 else []
    write_csv(os.path.join(out_dir, "theta2.csv"), ["epoch"] + names,
              ([i + 1] + [row[n] for n in names] for i, row in enumerate(rep.theta2)))
    return ckpt


def cmd_fit(cfg: dict, data_dir: str, out: str, resume: str | None = None, progress=None) -> TrainReport:
    ds = SnapshotDataset.load(data_dir)
    _check_dataset(cfg, ds)
    mm, dyn = build_models(cfg)
    lcfg = loss_config(cfg)
    prev = None
    if resume is not None:
        prev_ckpt = load_checkpoint(resume)
        prev = report_from_checkpoint(prev_ckpt)
        if prev_ckpt["map"] != mm.to_dict() or prev_ckpt["dynamics"] != dyn.to_dict():
            raise InvalidConfig("resume: checkpoint models do not match the config")
    out_dir = os.path.join(out, "fit")
    t0 = time.perf_counter()
    try:
        rep = fit(ds, mm, dyn, lcfg, resume=prev, callback=progress)
    except TrainingAborted as exc:
        _write_fit_outputs(out_dir, cfg, exc.report, mm, dyn, ds, status="aborted")
        raise
    _write_fit_outputs(out_dir, cfg, rep, mm, dyn, ds)
    _timing(out, "fit", time.perf_counter() - t0)
    return rep


def cmd_bayes_fit(cfg: dict, data_dir: str, ckpt_path: str, out: str, progress=None) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    ds = SnapshotDataset.load(data_dir)
    _check_dataset(cfg, ds)
    mm, dyn, params = models_from_checkpoint(ckpt)
    det = report_from_checkpoint(ckpt)
    bcfg = BayesConfig(**{**cfg["bayes"], "seed": cfg["seed"]})
    t0 = time.perf_counter()
    rep = bayes_fit(ds, mm, dyn, det, LossConfig.from_dict(ckpt["loss_config"]), bcfg, callback=progress)
    out_obj = rep.to_dict()
    out_obj["reported"] = _reported_posterior(dyn, rep)
    dump_json(os.path.join(out, "bayes", "posterior.json"), out_obj)
    _timing(out, "bayes-fit", time.perf_counter() - t0)
    return out_obj


def _reported_posterior(dyn: DynamicsModel, rep) -> dict:
    """Posterior summary in the reporting parameterisation (symmetrised D)."""
    post = rep.posterior()
    if dyn.diffusion.kind != "full":
        return post
    d = dyn.dim
    out = {k: v for k, v in post.items() if not k.startswith("theta_D_")}
    for i in range(d):
        for j in range(d):
            a, b = post[f"theta_D_{i + 1}{j + 1}"], post[f"theta_D_{j + 1}{i + 1}"]
            if i == j:
                out[f"theta_D_{i + 1}{j + 1}"] = a
            else:
                out[f"theta_D_{i + 1}{j + 1}"] = {"mean": 0.5 * (a["mean"] + b["mean"]),
                                                  "std": 0.5 * float(np.hypot(a["std"], b["std"]))}
    return out


def _grid_axes(rcfg: dict):
    return np.linspace(rcfg["lo"], rcfg["hi"], rcfg["resolution"])


def cmd_report(ckpt_path: str, out: str, grid: dict | None = None) -> list[str]:
    ckpt = load_checkpoint(ckpt_path)
    mm, dyn, params = models_from_checkpoint(ckpt)
    rcfg = deep_merge(DEFAULTS["report"], ckpt["config"].get("report", {}))
    rcfg = deep_merge(rcfg, grid or {})
    d = mm.dim
    ax = _grid_axes(rcfg)
    out_dir = os.path.join(out, "report")
    written = []
    if d == 1:
        pts = ax[:, None]
        header = ["x1"]
    else:
        i, j = rcfg["plane"]
        g1, g2 = np.meshgrid(ax, ax, indexing="ij")
        pts = np.zeros((g1.size, d))
        pts[:, i], pts[:, j] = g1.ravel(), g2.ravel()
        header = [f"x{i + 1}", f"x{j + 1}"]
        cols = [i, j]
    for t in rcfg["times"]:
        rho = np.exp(log_pullback_density(mm, pts, t, params))
        path = os.path.join(out_dir, f"density_t{t:g}.csv")
        coords = pts if d == 1 else pts[:, cols]
        write_csv(path, header + ["density"], np.column_stack([coords, rho]))
        written.append(path)
    shift = 0.0
    if dyn.potential.kind == "neural":
        # only defined up to a constant: pin it to zero at the data mean
        shift = float(potential_value(dyn.potential, np.asarray([ckpt["data_stats"]["mean"]]), params)[0])
    psi = potential_value(dyn.potential, pts, params) - shift
    path = os.path.join(out_dir, "potential.csv")
    write_csv(path, header + ["psi"], np.column_stack([pts if d == 1 else pts[:, cols], psi]))
    written.append(path)
    for k in range(d):
        line = np.zeros((len(ax), d))
        line[:, k] = ax
        path = os.path.join(out_dir, f"potential_slice_x{k + 1}.csv")
        write_csv(path, [f"x{k + 1}", "psi"], np.column_stack([ax, potential_value(dyn.potential, line, params) - shift]))
        written.append(path)
    dump_json(os.path.join(out_dir, "grid.json"), rcfg)
    return written


def parameter_errors(estimate: dict[str, float], truth: dict[str, float]) -> dict:
    out = {}
    for name, true in truth.items():
        if name not in estimate:
            continue
        err = abs(estimate[name] - true)
        out[name] = {"estimate": estimate[name], "truth": true, "abs_error": err,
                     "rel_error": err / abs(true) if true != 0 else None}
    errs = [v["abs_error"] for v in out.values()]
    return {"parameters": out, "max_abs_error": max(errs) if errs else 0.0}


def _align_wells(estimate: dict, dyn: DynamicsModel, truth: dict) -> dict:
    """The two wells are exchangeable; pick the labelling closest to the truth."""
    if dyn.potential.kind != "lse_wells":
        return estimate
    d = dyn.dim
    swapped = dict(estimate)
    for i in range(d):
        a, b = f"theta_psi_1_{i + 1}", f"theta_psi_2_{i + 1}"
        swapped[a], swapped[b] = estimate[b], estimate[a]
    names = dyn.potential.names()

    def err(e):
        return sum((e[n] - truth[n]) ** 2 for n in names)

    return swapped if err(swapped) < err(estimate) else estimate


def cmd_eval_truth(ckpt_path: str, cfg: dict | None, out: str) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    cfg = cfg or ckpt["config"]
    if cfg.get("truth") is None:
        raise InvalidConfig("truth: the preset has no known ground truth")
    mm, dyn, params = models_from_checkpoint(ckpt)
    truth = truth_named(cfg, dyn)
    est = _align_wells(dyn.named_values(params), dyn, truth)
    metrics = parameter_errors(est, truth)
    if dyn.potential.kind == "neural":
        metrics["psi_rms_error"] = potential_rms_error(dyn, params, cfg, ckpt["data_stats"])
    dump_json(os.path.join(out, "eval", "metrics.json"), metrics)
    return metrics


def potential_rms_error(dyn: DynamicsModel, params: ParamVector, cfg: dict, stats: dict, n: int = 4000) -> float:
    """RMS of mean-shifted Psi differences on the data bounding box."""
    lo, hi = np.asarray(stats["lo"]), np.asarray(stats["hi"])
    x = np.random.default_rng(0).uniform(lo, hi, size=(n, dyn.dim))
    truth = cfg["truth"]
    tpot = POTENTIALS[truth["potential"]](dyn.dim)
    tp = ParamVector()
    tp.add(tpot.segment, truth["theta_psi"])
    a = potential_value(dyn.potential, x, params)
    b = potential_value(tpot, x, tp)
    diff = (a - a.mean()) - (b - b.mean())
    return float(np.sqrt(np.mean(diff ** 2)))
