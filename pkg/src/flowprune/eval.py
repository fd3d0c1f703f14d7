"""Evaluation and export: sample quality, grids, and the 2-class classifier.

Sample quality is the fraction of draws within n standard deviations of the
nearest generator mode. Grid exports (density, vector field, trajectories,
decision boundary) write CSV plus a JSON sidecar recording the parameter
hash, the grid, and any derived scalars, so a figure can always be traced to
the model state that produced it.

The classifier is an affine read-out on the terminal state of the same ODE
block the flows use; its prune/retrain loop mirrors the flow trainer with
validation accuracy as the early-stop signal. Cross-entropy values ride in
the history's NLL columns, and per-iteration accuracies go to a separate
accuracy table.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import cnf, odeint, prune, rng
from .cnf import _PlainRHS
from .net import Mask, MlpSpec, ParamVector
from .odeint import SolverConfig

HEAD_SIZE = 6  # (2, 2) logit map plus 2 biases


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation lattice; t_eval None means the solver's t0."""

    x_range: tuple = (-6.0, 6.0)
    y_range: tuple = (-6.0, 6.0)
    resolution: int = 120
    t_eval: float = None

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if not (self.x_range[0] < self.x_range[1]
                and self.y_range[0] < self.y_range[1]):
            raise ValueError("grid ranges must be non-degenerate")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.resolution)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.resolution)

    def nodes(self) -> np.ndarray:
        """(resolution^2, 2) row-major: y varies over rows, x over columns."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @property
    def cell_area(self) -> float:
        dx = (self.x_range[1] - self.x_range[0]) / (self.resolution - 1)
        dy = (self.y_range[1] - self.y_range[0]) / (self.resolution - 1)
        return dx * dy

    def to_json(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "resolution": self.resolution, "t_eval": self.t_eval}


@dataclass
class GridData:
    """Values on a GridSpec lattice, shaped (ny, nx)."""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    missing: int = 0
    log_scale: bool = False


# ---------------------------------------------------------------------------
# sample quality


def good_quality_fraction(samples, mode_centers, mode_sigma, n_std: float = 2.0) -> float:
    """Fraction of samples within n_std * sigma of their nearest mode."""
    samples = np.asarray(samples, dtype=np.float64)
    centers = np.asarray(mode_centers, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("samples must be non-empty (n, 2)")
    if centers.ndim != 2 or centers.shape[0] == 0 or mode_sigma is None:
        raise ValueError("mode metadata required (centers and sigma)")
    if mode_sigma <= 0 or n_std <= 0:
        raise ValueError("mode_sigma and n_std must be positive")
    d = np.linalg.norm(samples[:, None, :] - centers[None], axis=2).min(axis=1)
    return float(np.mean(d <= n_std * mode_sigma))


def quality_report(samples, mode_centers, mode_sigma) -> dict:
    return {f"good_frac_{n}std": good_quality_fraction(samples, mode_centers,
                                                       mode_sigma, n_std=n)
            for n in (2, 3, 5)}


# ---------------------------------------------------------------------------
# export plumbing


def params_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(
        np.asarray(theta, dtype=np.float64).astype("<f8").tobytes()).hexdigest()


def _sidecar(path: str, payload: dict) -> None:
    with open(path + ".json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _flow_parts(model):
    """(spec, effective theta, solver) for a FlowModel or ClassifierModel."""
    if isinstance(model, ClassifierModel):
        model = model.flow
    return model.spec, model.effective_theta(), model.solver


def points_to_csv(points: np.ndarray, path: str) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for p in points:
            w.writerow([repr(float(p[0])), repr(float(p[1]))])
    _sidecar(path, {"kind": "points", "n": int(points.shape[0])})


def export_density_grid(model: cnf.FlowModel, grid: GridSpec, path: str) -> GridData:
    """exp(log p) on the lattice, exact divergence; failed cells go missing.

    CSV layout: a metadata header row and its value row (grid spec plus the
    missing-cell count), then `resolution` rows of `resolution` densities,
    row-major from y_min. NaN marks a cell whose solve failed.
    """
    nodes = grid.nodes()
    dens = np.full(nodes.shape[0], np.nan)
    for start in range(0, nodes.shape[0], 2048):
        chunk = nodes[start : start + 2048]
        try:
            dens[start : start + chunk.shape[0]] = np.exp(
                cnf.log_prob(model, chunk))
        except odeint.IntegrationError:
            for j in range(chunk.shape[0]):  # isolate the failing cells
                try:
                    dens[start + j] = math.exp(cnf.log_prob(model, chunk[j]))
                except odeint.IntegrationError:
                    pass
    missing = int(np.sum(~np.isfinite(dens)))
    values = dens.reshape(grid.resolution, grid.resolution)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_min", "x_max", "y_min", "y_max", "resolution",
                    "t0", "t1", "missing_cells"])
        _, _, solver = _flow_parts(model)
        w.writerow([repr(float(grid.x_range[0])), repr(float(grid.x_range[1])),
                    repr(float(grid.y_range[0])), repr(float(grid.y_range[1])),
                    grid.resolution, repr(float(solver.t0)),
                    repr(float(solver.t1)), missing])
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    spec, theta, _ = _flow_parts(model)
    _sidecar(path, {"kind": "density", "checkpoint_hash": params_hash(theta),
                    "grid": grid.to_json(), "missing_cells": missing})
    return GridData(xs=grid.xs, ys=grid.ys, values=values, missing=missing)


def load_grid_csv(path: str) -> GridData:
    """Read back a density/boundary grid written by this module."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    if header[0] == "x_min":  # matrix layout with a metadata row
        meta = rows[0]
        res = int(meta[4])
        xs = np.linspace(float(meta[0]), float(meta[1]), res)
        ys = np.linspace(float(meta[2]), float(meta[3]), res)
        values = np.array([[float(v) for v in row] for row in rows[1:]])
        return GridData(xs=xs, ys=ys, values=values,
                        missing=int(meta[7]) if len(meta) > 7 else 0)
    # long layout: x, y, value triplets on a lattice
    x = np.array([float(r_[0]) for r_ in rows])
    y = np.array([float(r_[1]) for r_ in rows])
    v = np.array([float(r_[2]) for r_ in rows])
    xs = np.unique(x)
    ys = np.unique(y)
    values = v.reshape(ys.size, xs.size)
    return GridData(xs=xs, ys=ys, values=values)


def export_vector_field(model, grid: GridSpec, path: str) -> np.ndarray:
    """f([x, y], t_eval) on grid nodes: columns x, y, fx, fy, f_norm."""
    from . import net

    spec, theta, solver = _flow_parts(model)
    t = solver.t0 if grid.t_eval is None else float(grid.t_eval)
    nodes = grid.nodes()
    f, _ = net.forward_cached(spec, theta, nodes, t)
    norm = np.linalg.norm(f, axis=1)
    out = np.column_stack([nodes, f, norm])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "fx", "fy", "f_norm"])
        for row in out:
            w.writerow([repr(float(v)) for v in row])
    _sidecar(path, {"kind": "vector_field", "checkpoint_hash": params_hash(theta),
                    "grid": grid.to_json(), "t_eval": t})
    return out


def export_trajectories(model, inputs, n_time_samples: int, path: str,
                        labels=None) -> np.ndarray:
    """z(t) at uniform knots for each input: columns sample_id, t, z1, z2."""
    if n_time_samples < 2:
        raise ValueError("n_time_samples must be >= 2")
    spec, theta, solver = _flow_parts(model)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    ts = np.linspace(solver.t0, solver.t1, n_time_samples)
    states, _ = odeint.integrate_path(_PlainRHS(spec, theta), inputs, solver, ts)
    traj = np.stack(states, axis=1)  # (S, T, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t", "z1", "z2"])
        for i in range(traj.shape[0]):
            for k, t in enumerate(ts):
                w.writerow([i, repr(float(t)), repr(float(traj[i, k, 0])),
                            repr(float(traj[i, k, 1]))])
    side = {"kind": "trajectories", "checkpoint_hash": params_hash(theta),
            "n_time_samples": int(n_time_samples), "n_samples": int(traj.shape[0])}
    if labels is not None:
        side["labels"] = [int(l) for l in labels]
    _sidecar(path, side)
    return traj


# ---------------------------------------------------------------------------
# the classifier


@dataclass
class ClassifierModel:
    """ODE block shared with the flows plus an affine logit read-out."""

    flow: cnf.FlowModel
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        self.head_w = np.asarray(self.head_w, dtype=np.float64).reshape(2, 2)
        self.head_b = np.asarray(self.head_b, dtype=np.float64).reshape(2)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(flow=self.flow.copy(), head_w=self.head_w.copy(),
                               head_b=self.head_b.copy())

    def packed(self) -> tuple:
        """(params, mask bits) with the head appended after the flow block."""
        params = np.concatenate([self.flow.params.values,
                                 self.head_w.ravel(), self.head_b])
        bits = np.concatenate([self.flow.mask.bits, np.ones(HEAD_SIZE)])
        return params, bits

    def unpack_into(self, params: np.ndarray) -> None:
        p = self.flow.spec.n_params
        self.flow.params.values[:] = params[:p]
        self.head_w = params[p : p + 4].reshape(2, 2)
        self.head_b = params[p + 4 :].copy()


def make_classifier(spec: MlpSpec, seed: int, solver: SolverConfig) -> ClassifierModel:
    flow = cnf.make_flow(spec, seed, solver=solver, divergence=cnf.EXACT)
    # zero the field's output layer so the flow starts as the identity map;
    # a random O(1) field at a large lr can fall into a contraction that
    # collapses terminal states and pins the CE loss at log 2
    w_sl, _, _ = spec.param_layout()[-1]
    flow.params.values[w_sl] = 0.0
    s = rng.stream(seed, "head")
    head_w = (s.uniform((4,)) * 2 - 1).reshape(2, 2) / math.sqrt(2.0)
    return ClassifierModel(flow=flow, head_w=head_w, head_b=np.zeros(2))


def terminal_states(clf: ClassifierModel, x) -> tuple:
    spec, theta, solver = _flow_parts(clf)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z1, n_evals = odeint.integrate(_PlainRHS(spec, theta), x, solver)
    return z1, n_evals


def logits(clf: ClassifierModel, x) -> np.ndarray:
    z1, _ = terminal_states(clf, x)
    return z1 @ clf.head_w.T + clf.head_b


def _softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def predict(clf: ClassifierModel, x) -> np.ndarray:
    return np.argmax(logits(clf, x), axis=1)


def accuracy(clf: ClassifierModel, x, y) -> float:
    y = np.asarray(y)
    return float(np.mean(predict(clf, x) == y))


def ce_loss_and_grads(clf: ClassifierModel, x, y):
    """(mean cross-entropy, grad wrt packed params, n_evals).

    The flow gradient goes through the solver's configured backprop path;
    the head gradient is closed-form on the terminal states. Flow entries
    are masked.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = x.shape[0]
    spec, theta, solver = _flow_parts(clf)
    rhs = _PlainRHS(spec, theta)
    onehot = np.zeros((B, 2))
    onehot[np.arange(B), y] = 1.0

    def cotangent(z_end):
        p = _softmax(z_end @ clf.head_w.T + clf.head_b)
        return ((p - onehot) / B) @ clf.head_w

    if solver.backprop == "bptt":
        z1, _, grad_theta, n_evals = odeint.backprop_bptt(rhs, x, solver, cotangent)
    else:
        z1, _, grad_theta, n_evals = odeint.backprop_adjoint(rhs, x, solver, cotangent)

    logit = z1 @ clf.head_w.T + clf.head_b
    p = _softmax(logit)
    loss = float(-np.mean(np.log(p[np.arange(B), y] + 1e-300)))
    bar_logits = (p - onehot) / B
    grad_w = bar_logits.T @ z1
    grad_b = bar_logits.sum(axis=0)
    grad = np.concatenate([grad_theta * clf.flow.mask.bits, grad_w.ravel(), grad_b])
    return loss, grad, n_evals


@dataclass
class AccuracyRecord:
    iter: int
    train_acc: float
    val_acc: float
    test_acc: float


def accuracy_to_csv(rows, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "train_acc", "val_acc", "test_acc"])
        for r in rows:
            w.writerow([r.iter, repr(float(r.train_acc)), repr(float(r.val_acc)),
                        repr(float(r.test_acc))])


def accuracy_from_csv(path: str) -> list:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["iter", "train_acc", "val_acc", "test_acc"]:
            raise ValueError(f"unrecognized accuracy header: {header}")
        for row in r:
            out.append(AccuracyRecord(int(row[0]), float(row[1]), float(row[2]),
                                      float(row[3])))
    return out


def _classifier_cycle(clf: ClassifierModel, train_points, train_labels,
                      train_cfg: prune.TrainConfig, epochs: int,
                      cycle_index: int) -> tuple:
    pts = np.asarray(train_points, dtype=np.float64)
    labs = np.asarray(train_labels, dtype=np.int64)
    n = pts.shape[0]
    n_params = clf.flow.spec.n_params + HEAD_SIZE
    state = prune.AdamState.init(n_params)
    mask = Mask(clf.packed()[1])
    step = 0
    n_evals = 0
    for epoch in range(epochs):
        lr = prune.lr_at(train_cfg, epoch)
        perm = rng.stream(train_cfg.seed, "batch", cycle_index, epoch).permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            sel = perm[start : start + train_cfg.batch_size]
            loss, grad, ne = ce_loss_and_grads(clf, pts[sel], labs[sel])
            n_evals += ne
            step += 1
            packed, _ = clf.packed()
            packed, state = prune.adam_step(packed, grad, state, train_cfg,
                                            step, lr=lr, mask=mask)
            clf.unpack_into(packed)
    return n_evals, state


def _classifier_eval(clf, splits):
    ces = []
    accs = []
    for ds in splits:
        lg = logits(clf, ds.points)
        p = _softmax(lg)
        y = np.asarray(ds.labels, dtype=np.int64)
        ces.append(float(-np.mean(np.log(p[np.arange(y.size), y] + 1e-300))))
        accs.append(float(np.mean(np.argmax(lg, axis=1) == y)))
    return ces, accs


def train_classifier(clf: ClassifierModel, splits, train_cfg: prune.TrainConfig,
                     prune_cfg: prune.PruneConfig, on_iteration=None,
                     start_iter: int = 0, history: prune.PruneHistory = None,
                     acc_rows: list = None):
    """Prune/retrain for the classifier; early stop on validation accuracy.

    Returns (best model, mask, history, accuracy rows, checkpoints). The
    history's NLL columns carry mean cross-entropy; accuracies live in the
    parallel accuracy rows. Only the flow block is pruned, never the head.
    """
    train_ds, val_ds, test_ds = splits
    if train_ds.labels is None:
        raise ValueError("classifier training needs labeled data")
    history = history if history is not None else prune.PruneHistory()
    acc_rows = acc_rows if acc_rows is not None else []
    checkpoints = []
    ckpt_by_iter = {}
    best_acc = -math.inf
    best_idx = -1
    stall = 0
    if start_iter > 0:
        if len(history.rows) != start_iter or len(acc_rows) != start_iter:
            raise ValueError("history does not line up with start_iter")
        pairs = [(r.val_acc, -r.iter) for r in acc_rows]
        best_acc, neg = max(pairs)
        best_idx = -neg
        stall = acc_rows[-1].iter - best_idx

    for it in range(start_iter, prune_cfg.max_iters + 1):
        t_start = time.perf_counter()
        n_evals = 0
        adam_state = None
        try:
            if it > 0:
                clf.flow.mask = prune.apply_prune(
                    clf.flow.params, clf.flow.mask, clf.flow.spec,
                    prune_cfg.mode, prune_cfg.pr_per_iter)
                clf.flow.params.values *= clf.flow.mask.bits
            n_evals, adam_state = _classifier_cycle(
                clf, train_ds.points, train_ds.labels, train_cfg,
                prune_cfg.epochs_per_cycle, it)
        except (prune.NonFiniteGradientError, prune.PruneError,
                odeint.IntegrationError):
            history.append(prune.PruneRecord(
                iter=it,
                prune_ratio=prune.sparsity(clf.flow.mask, clf.flow.spec,
                                           prune_cfg.mode),
                params_remaining=clf.flow.mask.n_active(),
                train_nll=math.nan, val_nll=math.nan, test_nll=math.nan,
                n_evals=n_evals, seconds=time.perf_counter() - t_start))
            break

        ces, accs = _classifier_eval(clf, (train_ds, val_ds, test_ds))
        history.append(prune.PruneRecord(
            iter=it,
            prune_ratio=prune.sparsity(clf.flow.mask, clf.flow.spec, prune_cfg.mode),
            params_remaining=clf.flow.mask.n_active(),
            train_nll=ces[0], val_nll=ces[1], test_nll=ces[2],
            n_evals=n_evals, seconds=time.perf_counter() - t_start))
        acc_rows.append(AccuracyRecord(it, accs[0], accs[1], accs[2]))
        checkpoints.append(clf.copy())
        ckpt_by_iter[it] = checkpoints[-1]
        if on_iteration is not None:
            on_iteration(it, checkpoints[-1], history.rows[-1], adam_state)

        if accs[1] > best_acc:
            best_acc = accs[1]
            best_idx = it
            stall = 0
        elif it > 0:
            stall += 1
            if stall > prune_cfg.patience:
                break

    if not checkpoints and start_iter == 0:
        raise prune.NonFiniteGradientError("training aborted before any checkpoint")
    if best_idx < 0:
        best_idx = history.rows[-1].iter if history.rows else 0
    if best_idx in ckpt_by_iter:
        best = ckpt_by_iter[best_idx].copy()
        return best, best.flow.mask, history, acc_rows, checkpoints
    return None, clf.flow.mask, history, acc_rows, checkpoints


def export_decision_boundary(clf: ClassifierModel, grid: GridSpec, path: str,
                             test_points=None):
    """p(class 1) on the lattice; returns (GridData, boundary margin).

    The margin is the smallest distance from any test point to a lattice
    node adjacent to the 0.5 level set (None without a sign change). CSV
    columns: x, y, p_class1, one row per node.
    """
    nodes = grid.nodes()
    p1 = np.empty(nodes.shape[0])
    for start in range(0, nodes.shape[0], 2048):
        chunk = nodes[start : start + 2048]
        p1[start : start + chunk.shape[0]] = _softmax(logits(clf, chunk))[:, 1]
    values = p1.reshape(grid.resolution, grid.resolution)

    s = np.sign(values - 0.5)
    edge = np.zeros_like(values, dtype=bool)
    edge[:-1, :] |= s[:-1, :] != s[1:, :]
    edge[1:, :] |= s[1:, :] != s[:-1, :]
    edge[:, :-1] |= s[:, :-1] != s[:, 1:]
    edge[:, 1:] |= s[:, 1:] != s[:, :-1]
    margin = None
    if test_points is not None and np.any(edge):
        gx, gy = np.meshgrid(grid.xs, grid.ys)
        bpts = np.stack([gx[edge], gy[edge]], axis=1)
        tp = np.asarray(test_points, dtype=np.float64)
        d = np.linalg.norm(tp[:, None, :] - bpts[None], axis=2)
        margin = float(d.min())

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "p_class1"])
        for (x, y), v in zip(nodes, p1):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    spec, theta, _ = _flow_parts(clf)
    _sidecar(path, {"kind": "decision_boundary",
                    "checkpoint_hash": params_hash(theta),
                    "grid": grid.to_json(), "margin": margin})
    return GridData(xs=grid.xs, ys=grid.ys, values=values), margin


# ---------------------------------------------------------------------------
# classifier job driver (mirrors the flow train job, plus exports)


def classifier_from_checkpoint(ckpt) -> ClassifierModel:
    """Rebuild a classifier from a checkpoint holding packed params."""
    from . import checkpoint as ckpt_mod
    from . import config as config_mod

    cfg = config_mod.config_from_doc(ckpt.config)
    spec = cfg.model
    p = spec.n_params
    if ckpt.params.size != p + HEAD_SIZE:
        raise ckpt_mod.CorruptCheckpointError(
            f"classifier checkpoint holds {ckpt.params.size} params, "
            f"expected {p + HEAD_SIZE}")
    flow = cnf.FlowModel(spec=spec,
                         params=ParamVector(ckpt.params[:p].copy(), spec),
                         mask=Mask(ckpt.mask[:p].copy()), solver=cfg.solver,
                         divergence=cfg.divergence)
    return ClassifierModel(flow=flow, head_w=ckpt.params[p : p + 4].reshape(2, 2),
                           head_b=ckpt.params[p + 4 :].copy())


def run_classifier_job(cfg_doc: dict, seed: int, out_dir: str) -> dict:
    """Train, checkpoint, and export one classifier run; resumable."""
    from pathlib import Path

    from . import checkpoint as ckpt_mod
    from . import config as config_mod

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config_mod.with_train_seed(config_mod.config_from_doc(cfg_doc), seed)
    doc = config_mod.config_to_doc(cfg)
    done_path = out / "done.json"
    if not done_path.exists():
        from . import data as data_mod

        ds = data_mod.make_dataset(cfg.dataset.kind, cfg.dataset.n,
                                   cfg.dataset.seed, **cfg.dataset.geometry)
        splits = data_mod.split(ds, cfg.dataset.fractions, seed=cfg.dataset.seed)

        start_iter = 0
        history = None
        acc_rows = None
        latest = None
        for pth in out.glob("ckpt_iter_*.ckpt"):
            k = int(pth.stem.split("_")[-1])
            if latest is None or k > latest[0]:
                latest = (k, pth)
        if latest is not None and (out / "accuracy_partial.csv").exists():
            k, pth = latest
            saved = ckpt_mod.load_checkpoint(str(pth))
            clf = classifier_from_checkpoint(saved)
            history = saved.history
            acc_rows = accuracy_from_csv(str(out / "accuracy_partial.csv"))[: k + 1]
            start_iter = k + 1
        else:
            clf = make_classifier(cfg.model, seed, cfg.solver)
            history = prune.PruneHistory()
            acc_rows = []

        def on_iteration(it, snapshot, record, adam_state):
            params, bits = snapshot.packed()
            ck = ckpt_mod.Checkpoint(
                config=doc, iteration=it, params=params, mask=bits,
                adam_m=None if adam_state is None else adam_state.m,
                adam_v=None if adam_state is None else adam_state.v,
                adam_t=0 if adam_state is None else adam_state.t,
                history=prune.PruneHistory(rows=list(history.rows)),
                streams={"next_batch": rng.stream(seed, "batch", it + 1, 0).state()})
            ckpt_mod.save_checkpoint(ck, str(out / f"ckpt_iter_{it:03d}.ckpt"))
            accuracy_to_csv(acc_rows, str(out / "accuracy_partial.csv"))

        best, _, hist, accs, _ = train_classifier(
            clf, splits, cfg.train, cfg.prune, on_iteration=on_iteration,
            start_iter=start_iter, history=history, acc_rows=acc_rows)

        hist.to_csv(str(out / "history.csv"), zero_seconds=cfg.deterministic)
        accuracy_to_csv(accs, str(out / "accuracy.csv"))
        (out / "accuracy_partial.csv").unlink(missing_ok=True)
        best_iter = max(((r.val_acc, -r.iter) for r in accs))
        best_iter = -best_iter[1]
        if best is None:
            best = classifier_from_checkpoint(ckpt_mod.load_checkpoint(
                str(out / f"ckpt_iter_{best_iter:03d}.ckpt")))
        params, bits = best.packed()
        ckpt_mod.save_checkpoint(
            ckpt_mod.Checkpoint(config=doc, iteration=best_iter, params=params,
                                mask=bits,
                                history=prune.PruneHistory(rows=list(hist.rows))),
            str(out / "best.ckpt"))

        test_ds = splits[2]
        summary = {
            "seed": int(seed),
            "best_iter": int(best_iter),
            "dense_test_acc": accs[0].test_acc,
            "best_test_acc": next(r.test_acc for r in accs if r.iter == best_iter),
            "rows": len(hist.rows),
            "out_dir": str(out),
        }

        # exports from the best iterate
        lo = ds.points.min(axis=0) - 0.5
        hi = ds.points.max(axis=0) + 0.5
        grid = GridSpec(x_range=(float(lo[0]), float(hi[0])),
                        y_range=(float(lo[1]), float(hi[1])), resolution=80)
        _, margin = export_decision_boundary(best, grid, str(out / "boundary.csv"),
                                             test_points=test_ds.points)
        summary["boundary_margin"] = margin
        export_vector_field(best, grid, str(out / "field.csv"))
        n_traj = min(40, test_ds.n)
        export_trajectories(best, test_ds.points[:n_traj], 21,
                            str(out / "trajectories.csv"),
                            labels=test_ds.labels[:n_traj])
        with open(done_path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        return summary
    with open(done_path) as fh:
        return json.load(fh)
