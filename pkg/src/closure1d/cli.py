"""Scenario configs, data generation, experiment drivers and the CLI.

Subcommands: generate-data, train, evaluate, gradcheck. Every run is
driven by a YAML config (documented in the README) plus --seed and
--out-dir overrides; all outputs are CSV / weight-dump files written
into the output directory, with matplotlib figures rendered alongside
them unless --no-plots is given.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
import yaml

from .adjoint import DataSet, grad_phi, grad_theta, integrate_adjoint, loss_eval
from .core import (
    ConstantHistory,
    InterpolantHistory,
    make_grid,
    read_fields_csv,
    write_fields_csv,
)
from .forward import (
    BlowUpError,
    ClosureModel,
    ClosureTerm,
    NonMarkovianTerm,
    integrate_forward,
)
from .library import FeatureLibrary
from .nets import (
    ConstraintSpec,
    DenseNet,
    net_from_doc,
    net_to_doc,
)
from .stencil import spatial_derivative
from .train import (
    TrainConfig,
    TrainingScenario,
    get_model_params,
    train_run,
)

__all__ = ["main", "load_config", "SmagorinskyTerm", "smagorinsky_closure"]


# ---------------------------------------------------------------- config

_TRAIN_KEYS = (
    "batch_time", "stride", "batch_size", "epochs", "iters_per_epoch",
    "lr0", "decay_rate", "decay_steps", "l1_factor", "l2_factor",
    "l1_factor_nonmark", "l2_factor_nonmark", "prune_threshold",
    "prune_every", "prune_start_epoch", "loss_kind", "seed",
    "round_robin_block", "skip_budget",
)


def load_config(path, seed=None, out_dir=None) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} did not parse to a mapping")
    cfg.setdefault("experiment", "custom")
    cfg.setdefault("seed", 0)
    cfg.setdefault("out_dir", "out")
    cfg.setdefault("plots", True)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    tc = {k: v for k, v in cfg.get("train", {}).items() if k in _TRAIN_KEYS}
    tc["seed"] = cfg["seed"]
    return TrainConfig(**tc)


def _domain(cfg):
    d = cfg.get("domain", {})
    return (
        float(d.get("x_min", 0.0)),
        float(d.get("x_max", 2.0 * math.pi)),
        d.get("bc", "periodic"),
    )


def scenario_grid(cfg, scn, fine=False):
    x_min, x_max, bc = _domain(cfg)
    n = int(scn["n_nodes"])
    if fine:
        n *= int(scn.get("fine_factor", 1))
    return make_grid(x_min, x_max, n, bc)


def ic_field(scn, grid, n_states=1) -> np.ndarray:
    """Sum-of-sines initial condition per state from the scenario config."""
    ic = scn.get("ic", {"modes": [{"k": 1, "amp": 1.0}]})
    u0 = np.zeros((n_states, grid.n_nodes))
    u0 += float(ic.get("offset", 0.0))
    for mode in ic.get("modes", []):
        s = int(mode.get("state", 0))
        u0[s] += float(mode.get("amp", 1.0)) * np.sin(
            float(mode["k"]) * grid.x + float(mode.get("phase", 0.0))
        )
    return u0


# ---------------------------------------------------------------- models

def coefficient_net(term_map: dict, lib: FeatureLibrary) -> DenseNet:
    """Single-state linear layer with fixed named coefficients."""
    w = np.zeros((1, lib.n_terms))
    for name, c in term_map.items():
        w[0, lib.term_names.index(name)] = float(c)
    return DenseNet([w], ["linear"])


def build_dense(in_dim, out_dim, spec: dict, rng) -> DenseNet:
    """Dense net from a closure spec block (hidden sizes, activation,
    init mode, optional tied output rows and output scaling)."""
    hidden = list(spec.get("hidden", []))
    dims = [in_dim] + hidden + [out_dim]
    act_hidden = spec.get("activation", "swish")
    acts = [act_hidden] * len(hidden) + ["linear"]
    init = spec.get("init", "zero" if not hidden else "random")
    scale = float(spec.get("init_scale", 0.1))
    weights = []
    for a, b in zip(dims[:-1], dims[1:]):
        if init == "zero":
            weights.append(np.zeros((b, a)))
        else:
            weights.append(scale * rng.standard_normal((b, a)))
    constraint = None
    if spec.get("constraint"):
        constraint = ConstraintSpec({
            int(r): {int(s): float(c) for s, c in combo.items()}
            for r, combo in spec["constraint"].items()
        })
    return DenseNet(weights, acts, constraint=constraint,
                    output_scale_index=spec.get("output_scale_index"))


def build_closure_model(cfg, n_states, rng) -> ClosureModel:
    """Trainable model from the config: frozen base + configured closures."""
    scn0 = cfg["scenarios"][0]
    base = None
    if scn0.get("base_terms"):
        if n_states != 1:
            raise ValueError("named base_terms only supported for one state")
        lib = FeatureLibrary(list(scn0["base_terms"]))
        base = ClosureTerm(lib, coefficient_net(scn0["base_terms"], lib),
                           trainable=False)
    closure = cfg.get("closure", {})
    markov = None
    if closure.get("markovian"):
        mk = closure["markovian"]
        lib = FeatureLibrary(mk["terms"])
        spec = dict(mk)
        if mk.get("output_scale_term"):
            spec["output_scale_index"] = lib.term_names.index(
                mk["output_scale_term"])
        net = build_dense(lib.n_features(n_states), n_states, spec, rng)
        markov = ClosureTerm(lib, net)
    nonmark = None
    if closure.get("nonmarkovian"):
        nm = closure["nonmarkovian"]
        lib = FeatureLibrary(nm["terms"])
        spec = dict(nm)
        if nm.get("output_scale_term"):
            spec["output_scale_index"] = lib.term_names.index(
                nm["output_scale_term"])
        net = build_dense(lib.n_features(n_states), n_states, spec, rng)
        nonmark = NonMarkovianTerm(lib, net, tau=float(nm["tau"]))
    return ClosureModel(n_states, base, markov, nonmark)


def build_truth_model(scn) -> ClosureModel:
    """Frozen single-state model: base terms plus injected extra terms."""
    terms = dict(scn.get("base_terms", {}))
    for name, c in scn.get("extra_terms", {}).items():
        terms[name] = terms.get(name, 0.0) + float(c)
    lib = FeatureLibrary(list(terms))
    return ClosureModel(
        1, base=ClosureTerm(lib, coefficient_net(terms, lib), trainable=False)
    )


class SmagorinskyTerm:
    """Classical eddy-viscosity subgrid baseline, not trainable."""

    trainable = False
    net = None

    def __init__(self, cs: float = 0.17, delta: float | None = None):
        self.cs = float(cs)
        self.delta = delta

    def output(self, u, grid, t):
        return smagorinsky_closure(u, grid, self.cs, self.delta)


def smagorinsky_closure(u, grid, cs, delta=None):
    """d_x( (cs*delta)^2 * |d_x u| * d_x u ), delta defaulting to h."""
    d = grid.h if delta is None else float(delta)
    ux = spatial_derivative(np.atleast_2d(u), 1, grid)
    return spatial_derivative((cs * d) ** 2 * np.abs(ux) * ux, 1, grid)


# ------------------------------------------------------------- data gen

def dataset_path(out_dir, cfg, name):
    if len(cfg["scenarios"]) == 1:
        return os.path.join(out_dir, "dataset.csv")
    return os.path.join(out_dir, f"dataset_{name}.csv")


def generate_scenario_data(cfg, scn, truth_model=None, ic_override=None):
    """Integrate the true model on the fine grid and restrict to the coarse
    grid by index subsampling. Returns (times, coarse snapshots)."""
    factor = int(scn.get("fine_factor", 1))
    fine = scenario_grid(cfg, scn, fine=True)
    dt = float(scn["dt"])
    fine_dt = float(scn.get("fine_dt") or dt / factor)
    sub = round(dt / fine_dt)
    if abs(sub * fine_dt - dt) > 1e-12:
        raise ValueError("fine_dt must divide dt")
    model = truth_model if truth_model is not None else build_truth_model(scn)
    u0 = ic_override if ic_override is not None else ic_field(scn, fine,
                                                              model.n_states)
    total = int(scn["n_steps"]) + int(scn.get("val_steps", 0))
    traj, _ = integrate_forward(model, fine, ConstantHistory(u0), 0.0,
                                total * dt, fine_dt)
    every = int(scn.get("data_every", 1))
    times = dt * every * np.arange(total // every + 1)
    snaps = np.array([traj.query(t)[:, ::factor] for t in times])
    noise = float(scn.get("noise", 0.0))
    if noise > 0:
        rng = np.random.default_rng(cfg["seed"] + 7919)
        snaps = snaps + noise * rng.standard_normal(snaps.shape)
    return times, snaps


def cmd_generate_data(cfg):
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    written = []
    for scn in cfg["scenarios"]:
        grid = scenario_grid(cfg, scn)
        if cfg["experiment"] == "constrained":
            model, _, u0 = build_constrained_system(cfg)
            times, snaps = generate_scenario_data(cfg, scn, model, u0)
        else:
            times, snaps = generate_scenario_data(cfg, scn)
        path = dataset_path(out, cfg, scn["name"])
        write_fields_csv(path, times, grid, list(snaps))
        written.append(path)
        print(f"wrote {path}: {len(times)} snapshots on {grid.n_nodes} nodes")
    if cfg.get("plots", True):
        from . import report
        for scn, path in zip(cfg["scenarios"], written):
            times, x, fields = read_fields_csv(path)
            report.plot_snapshots(path.replace(".csv", ".png"), x, times,
                                  fields, title=f"dataset {scn['name']}")
    return written


def load_scenario_data(cfg, scn):
    path = dataset_path(cfg["out_dir"], cfg, scn["name"])
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path} missing; run generate-data first")
    times, x, fields = read_fields_csv(path)
    return times, np.array(fields)


def split_windows(cfg, scn, times, snaps):
    """(train_times, train_snaps, val_times, val_snaps) per config split."""
    every = int(scn.get("data_every", 1))
    n_train = int(scn["n_steps"]) // every
    return (times[: n_train + 1], snaps[: n_train + 1],
            times[n_train:], snaps[n_train:])


# ------------------------------------------------------------ constrained

def constrained_constants(cfg):
    c = cfg.get("constrained", {})
    return (float(c.get("c_p", 0.10)), float(c.get("c_z", 0.12)),
            float(c.get("c_d", 0.08)), float(c.get("rho_w", 1000.0)))


def constrained_tie(cfg) -> ConstraintSpec:
    """Tied output rows for a six-state system: row 0 balances rows 1-3
    so their sum vanishes nodewise; rows 4 and 5 are fixed linear images
    of rows 1-3 (gas uptake and mass-normalized transfer analogues)."""
    c_p, c_z, c_d, rho_w = constrained_constants(cfg)
    return ConstraintSpec({
        0: {1: -1.0, 2: -1.0, 3: -1.0},
        4: {1: -c_p, 2: -c_z, 3: -c_d},
        5: {1: 1.0 / rho_w, 2: 1.0 / rho_w, 3: 1.0 / rho_w},
    })


def build_constrained_system(cfg):
    """Six-state synthetic conservative advection-diffusion-exchange system.

    Returns (truth model, template closure model, initial field). The truth
    is the base plus a quadratic inter-state exchange that itself lies on
    the constraint manifold, so the tied closure can represent it exactly.
    """
    scn = cfg["scenarios"][0]
    grid = scenario_grid(cfg, scn, fine=True)
    n_states = 6
    c = cfg.get("constrained", {})
    kappa = float(c.get("kappa", 0.05))
    spec = constrained_tie(cfg)

    lib_base = FeatureLibrary(["u", "uxx"])
    wb = np.zeros((n_states, lib_base.n_features(n_states)))
    for s in range(n_states):
        wb[s, 2 * s + 1] = kappa  # own-state diffusion
    base_net = DenseNet([wb], ["linear"])
    base = ClosureTerm(lib_base, base_net, trainable=False)

    lib_x = FeatureLibrary(["u", "u2"])
    wx = np.zeros((n_states, lib_x.n_features(n_states)))
    # fixed exchange coefficients on the free rows (1, 2, 3)
    ex = c.get("exchange", {
        "1": {"0": 0.4, "3": -0.2},      # uptake from state 0, loss to 3
        "2": {"2-q": 0.3, "4-q": -0.1},  # quadratic self and cross terms
        "3": {"1": 0.25, "5-q": -0.15},
    })
    for row, combo in ex.items():
        for key, val in combo.items():
            col = key.split("-")
            j = int(col[0])
            idx = 2 * j + (1 if len(col) > 1 and col[1] == "q" else 0)
            wx[int(row), idx] = float(val)
    truth_net = DenseNet([wx.copy()], ["linear"], constraint=spec)
    from .nets import apply_constraints
    apply_constraints(truth_net)
    truth = ClosureModel(n_states, base=base,
                         markovian=ClosureTerm(lib_x, truth_net,
                                               trainable=False))

    closure_net = DenseNet([np.zeros_like(wx)], ["linear"], constraint=spec)
    template = ClosureModel(
        n_states,
        base=ClosureTerm(lib_base, base_net.copy(), trainable=False),
        markovian=ClosureTerm(lib_x, closure_net),
    )

    u0 = np.zeros((n_states, grid.n_nodes))
    levels = c.get("ic_levels", [1.0, 0.6, 0.4, 0.3, 2.0, 0.5])
    for s in range(n_states):
        u0[s] = levels[s] * (1.0 + 0.3 * np.sin(grid.x + 0.7 * s))
    return truth, template, u0


def conserved_total(u, n_conserved=4):
    return float(np.sum(u[:n_conserved]))


# --------------------------------------------------------------- rollout

def rollout_rmse(model, grid, dt, times, snaps, history=None):
    """Continuous rollout from the first snapshot; per-snapshot field RMSE.
    Blow-up yields inf for every snapshot past the failure time."""
    t0, T = float(times[0]), float(times[-1])
    if history is None:
        history = ConstantHistory(snaps[0], t0)
    rmse = np.full(len(times) - 1, np.inf)
    try:
        traj, _ = integrate_forward(model, grid, history, t0, T, dt)
    except BlowUpError as e:
        try:
            traj, _ = integrate_forward(
                model, grid, history, t0,
                t0 + math.floor((e.t - t0) / dt - 1) * dt, dt)
        except (BlowUpError, ValueError):
            return rmse, None
    for i, t in enumerate(times[1:]):
        if t > traj.t_last + 1e-9:
            break
        u = traj.query(t)
        rmse[i] = math.sqrt(np.mean((u - snaps[i + 1]) ** 2))
    return rmse, traj


def window_rmse(rmse_series) -> float:
    return float(np.sqrt(np.mean(np.square(rmse_series))))


# ----------------------------------------------------------- csv helpers

def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_losses(out, rows):
    path = os.path.join(out, "losses.csv")
    write_csv(path, ["epoch", "iter", "scenario", "train_loss", "val_loss",
                     "lr", "n_pruned", "n_skipped"],
              [[r["epoch"], r["iter"], r["scenario"], r["train_loss"],
                r["val_loss"], r["lr"], r["n_pruned"], r["n_skipped"]]
               for r in rows])
    return path


def save_model_weights(model: ClosureModel, path):
    doc = {}
    if model.markovian is not None and model.markovian.trainable:
        doc["markovian"] = net_to_doc(model.markovian.net)
    if model.nonmarkovian is not None and model.nonmarkovian.trainable:
        doc["nonmarkovian"] = net_to_doc(model.nonmarkovian.net)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model_weights(model: ClosureModel, path):
    with open(path) as fh:
        doc = json.load(fh)
    if "markovian" in doc:
        model.markovian.net = net_from_doc(doc["markovian"])
    if "nonmarkovian" in doc:
        model.nonmarkovian.net = net_from_doc(doc["nonmarkovian"])
    return model


def write_coefficients(out, model: ClosureModel):
    """term,coefficient,pruned rows for a single-layer linear closure."""
    net = model.markovian.net
    lib = model.markovian.lib
    if len(net.weights) != 1:
        return None
    path = os.path.join(out, "coefficients.csv")
    rows = []
    w, m = net.weights[0], net.masks[0]
    n_terms = lib.n_terms
    for s_out in range(w.shape[0]):
        for j in range(w.shape[1]):
            owner, term = divmod(j, n_terms)
            name = lib.term_names[term]
            label = name if w.shape[0] == 1 else f"s{s_out}<-s{owner}:{name}"
            rows.append([label, float(w[s_out, j]), int(m[s_out, j])])
    write_csv(path, ["term", "coefficient", "pruned"], rows)
    return path


# --------------------------------------------------------------- drivers

def assemble_scenarios(cfg, model):
    scns = []
    for scn in cfg["scenarios"]:
        grid = scenario_grid(cfg, scn)
        times, snaps = load_scenario_data(cfg, scn)
        tt, ts, vt, vs = split_windows(cfg, scn, times, snaps)
        scns.append(TrainingScenario(scn["name"], model, grid,
                                     float(scn["dt"]), tt, ts, vt, vs))
    return scns


def cmd_train(cfg):
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    for scn in cfg["scenarios"]:
        if not os.path.exists(dataset_path(out, cfg, scn["name"])):
            cmd_generate_data(cfg)
            break
    rng = np.random.default_rng(cfg["seed"])
    if cfg["experiment"] == "constrained":
        _, model, _ = build_constrained_system(cfg)
    else:
        model = build_closure_model(cfg, 1, rng)
    tcfg = train_config_from(cfg)
    scenarios = assemble_scenarios(cfg, model)
    save_every = int(cfg.get("train", {}).get("save_every", 0))

    def callback(epoch, row):
        if save_every and (epoch + 1) % save_every == 0:
            save_model_weights(
                model, os.path.join(out, f"weights_epoch_{epoch + 1}.txt"))
        if (epoch + 1) % max(1, tcfg.epochs // 10) == 0:
            print(f"epoch {epoch + 1}/{tcfg.epochs} "
                  f"train {row['train_loss']:.3e} val {row['val_loss']:.3e}")

    rows, _ = train_run(scenarios, tcfg, callback)
    write_losses(out, rows)
    save_model_weights(model, os.path.join(out, f"weights_epoch_{tcfg.epochs}.txt"))
    save_model_weights(model, os.path.join(out, "weights_final.txt"))
    if model.markovian is not None and model.markovian.trainable:
        write_coefficients(out, model)

    if cfg["experiment"] == "exp1b":
        run_exp1b_metrics(cfg, model)
    elif cfg["experiment"] == "constrained":
        run_constrained_metrics(cfg, model)
    if cfg.get("plots", True):
        from . import report
        report.plot_losses(os.path.join(out, "losses.png"), rows)
        if model.markovian is not None and len(model.markovian.net.weights) == 1:
            report.plot_coefficients(
                os.path.join(out, "coefficients.png"),
                os.path.join(out, "coefficients.csv"))
    return rows, model


def _eval_windows(cfg, scn, model_map):
    """RMSE comparison rows over train/val (and optional future) windows."""
    grid = scenario_grid(cfg, scn)
    dt = float(scn["dt"])
    times, snaps = load_scenario_data(cfg, scn)
    tt, ts, vt, vs = split_windows(cfg, scn, times, snaps)
    windows = [("train", tt, ts), ("val", vt, vs)]
    rows = []
    series = {}
    for wname, wt, ws in windows:
        if len(wt) < 2:
            continue
        for mname, model in model_map.items():
            history = None
            if getattr(model, "nonmarkovian", None) is not None:
                history = InterpolantHistory(times, snaps, float(wt[0]))
            r, _ = rollout_rmse(model, grid, dt, wt, ws, history)
            rows.append([scn["name"], wname, mname, window_rmse(r)])
            series[(wname, mname)] = (wt[1:], r)
    return rows, series


def run_exp1b_metrics(cfg, model):
    """Comparison table: no closure vs learned closure vs Smagorinsky."""
    out = cfg["out_dir"]
    cs = float(cfg.get("smagorinsky", {}).get("cs", 0.17))
    rows = []
    all_series = {}
    for scn in cfg["scenarios"]:
        base_only = ClosureModel(model.n_states, base=model.base)
        smag = ClosureModel(model.n_states, base=model.base,
                            markovian=SmagorinskyTerm(cs))
        r, series = _eval_windows(cfg, scn, {
            "no_closure": base_only,
            "learned": model,
            "smagorinsky": smag,
        })
        rows.extend(r)
        for k, v in series.items():
            all_series[(scn["name"],) + k] = v
    path = os.path.join(out, "metrics.csv")
    write_csv(path, ["scenario", "window", "method", "rmse"], rows)
    for row in rows:
        print("metrics: " + ",".join(_fmt(v) for v in row))
    if cfg.get("plots", True):
        from . import report
        report.plot_method_comparison(os.path.join(out, "metrics.png"),
                                      all_series)
    return rows


def run_constrained_metrics(cfg, model):
    """Conservation drift report: closed rollout vs base-only rollout."""
    out = cfg["out_dir"]
    scn = cfg["scenarios"][0]
    grid = scenario_grid(cfg, scn)
    dt = float(scn["dt"])
    times, snaps = load_scenario_data(cfg, scn)
    tt, ts, vt, vs = split_windows(cfg, scn, times, snaps)
    base_only = ClosureModel(model.n_states, base=model.base)
    rows = []
    for mname, m in (("no_closure", base_only), ("learned", model)):
        r, traj = rollout_rmse(m, grid, dt, vt, vs)
        drift = math.nan
        if traj is not None:
            drift = conserved_total(traj.query(traj.t_last)) - conserved_total(
                traj.query(traj.t0))
        rows.append([scn["name"], "val", mname, window_rmse(r), drift])
    path = os.path.join(out, "metrics.csv")
    write_csv(path, ["scenario", "window", "method", "rmse",
                     "conserved_drift"], rows)
    for row in rows:
        print("metrics: " + ",".join(_fmt(v) for v in row))
    return rows


def cmd_evaluate(cfg, weights=None, window="val"):
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    if cfg["experiment"] == "constrained":
        _, model, _ = build_constrained_system(cfg)
    else:
        model = build_closure_model(cfg, 1, rng)
    if weights is None:
        weights = os.path.join(out, "weights_final.txt")
    load_model_weights(model, weights)
    rows = []
    for scn in cfg["scenarios"]:
        grid = scenario_grid(cfg, scn)
        dt = float(scn["dt"])
        times, snaps = load_scenario_data(cfg, scn)
        tt, ts, vt, vs = split_windows(cfg, scn, times, snaps)
        wt, ws = (tt, ts) if window == "train" else (vt, vs)
        if len(wt) < 2:
            continue
        history = None
        if model.nonmarkovian is not None:
            history = InterpolantHistory(times, snaps, float(wt[0]))
        r, _ = rollout_rmse(model, grid, dt, wt, ws, history)
        for t, v in zip(wt[1:], r):
            rows.append([scn["name"], window, "learned", float(t), float(v)])
    path = os.path.join(out, "metrics.csv")
    write_csv(path, ["scenario", "window", "method", "t", "rmse"], rows)
    print(f"wrote {path}: {len(rows)} rows")
    if cfg.get("plots", True) and rows:
        from . import report
        report.plot_rollout_rmse(os.path.join(out, "metrics.png"), rows)
    return rows


# -------------------------------------------------------------- gradcheck

def gradcheck_model(model, grid, dt, times, snaps, loss_kind="mse", eps=1e-5):
    """Central finite differences over every free parameter against the
    adjoint gradient of the whole-window loss. Returns per-parameter rows
    [param_id, adjoint_grad, fd_grad, rel_err]."""
    from .nets import fold_grads
    from .train import set_model_params

    t0, T = float(times[0]), float(times[-1])
    n = grid.n_nodes
    data = DataSet(times[1:], [np.arange(n)] * (len(times) - 1),
                   list(snaps[1:]), loss_kind)
    history = ConstantHistory(snaps[0], t0)

    def solve():
        traj, _ = integrate_forward(model, grid, history, t0, T, dt)
        return traj

    p0 = get_model_params(model)
    traj = solve()
    rec = integrate_adjoint(traj, data, model, grid, dt)
    parts = []
    if model.markovian is not None and model.markovian.trainable:
        parts.append(fold_grads(model.markovian.net,
                                grad_phi(traj, rec, model, grid)))
    if model.nonmarkovian is not None and model.nonmarkovian.trainable:
        parts.append(fold_grads(model.nonmarkovian.net,
                                grad_theta(traj, rec, model, history, grid)))
    g = np.concatenate(parts) if parts else np.zeros(0)

    rows = []
    for i in range(len(p0)):
        v = p0.copy()
        v[i] = p0[i] + eps
        set_model_params(model, v)
        lp = loss_eval(solve(), data)
        v[i] = p0[i] - eps
        set_model_params(model, v)
        lm = loss_eval(solve(), data)
        fd = (lp - lm) / (2.0 * eps)
        if abs(fd) < 1e-12 and abs(g[i]) < 1e-12:
            rel = 0.0
        else:
            rel = abs(g[i] - fd) / max(abs(fd), abs(g[i]), 1e-12)
        rows.append([i, float(g[i]), float(fd), float(rel)])
    set_model_params(model, p0)
    return rows


def cmd_gradcheck(cfg):
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    gc = cfg.get("gradcheck", {})
    eps = float(gc.get("eps", 1e-5))
    rng = np.random.default_rng(cfg["seed"])
    scn = cfg["scenarios"][0]
    grid = scenario_grid(cfg, scn)
    dt = float(scn["dt"])
    model = build_closure_model(cfg, 1, rng)
    p0 = get_model_params(model)
    if np.all(p0 == 0):
        # zero weights make the check degenerate; use small random ones
        from .train import set_model_params
        set_model_params(model, 0.1 * rng.standard_normal(len(p0)))
    times, snaps = generate_scenario_data(cfg, scn)
    rows = gradcheck_model(model, grid, dt, times, np.array(snaps),
                           cfg.get("train", {}).get("loss_kind", "mse"), eps)
    path = os.path.join(out, "gradcheck.csv")
    write_csv(path, ["param_id", "adjoint_grad", "fd_grad", "rel_err"], rows)
    max_err = max(r[3] for r in rows) if rows else 0.0
    print(f"gradcheck: {len(rows)} parameters, max rel err {max_err:.3e}")
    if cfg.get("plots", True):
        from . import report
        report.plot_gradcheck(os.path.join(out, "gradcheck.png"), rows)
    return rows


# ------------------------------------------------------------------ main

def main(argv=None):
    p = argparse.ArgumentParser(
        prog="closure1d",
        description="Neural closure learning for 1D P(D)DEs via continuous "
                    "adjoints",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate-data", "train", "evaluate", "gradcheck"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--no-plots", action="store_true")
        if name == "evaluate":
            sp.add_argument("--weights", default=None)
            sp.add_argument("--window", default="val",
                            choices=("train", "val"))
    args = p.parse_args(argv)
    cfg = load_config(args.config, args.seed, args.out_dir)
    if args.no_plots:
        cfg["plots"] = False
    if args.command == "generate-data":
        cmd_generate_data(cfg)
    elif args.command == "train":
        cmd_train(cfg)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.weights, args.window)
    elif args.command == "gradcheck":
        cmd_gradcheck(cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
