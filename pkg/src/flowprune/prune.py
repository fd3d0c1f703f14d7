"""Iterative magnitude pruning with learning-rate rewinding.

The training loop is plain Adam/AdamW over flat parameter vectors. Pruning
comes in two modes:

  unstructured  global pool of unmasked weight entries (biases excluded),
                scored by |w|, the floor(pr * remaining) smallest removed
  structured    per hidden layer, neurons scored by the l1 norm of their
                live incoming row; pruning a neuron masks its row, its bias,
                and its outgoing column; output units are never pruned

The sparse trainer runs a dense warm start, then repeats prune -> retrain
with the optimizer state reset and the learning-rate schedule rewound to
epoch 0 each cycle, stopping early when validation NLL has not improved for
`patience` consecutive iterations. Ties in scores break toward the lowest
flat index so runs are reproducible.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import cnf, odeint, rng
from .net import Mask, MlpSpec, ParamVector

OPTIMIZERS = ("adam", "adamw")
PRUNE_MODES = ("unstructured", "structured")


class PruneError(ValueError):
    """A prune request that cannot be honored."""


class NonFiniteGradientError(RuntimeError):
    """Training gradient went NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer hyperparameters for one training cycle."""

    optimizer: str = "adamw"
    lr: float = 5e-3
    lr_steps: tuple = ()
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 1024
    epochs: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        for step in self.lr_steps:
            if len(step) != 2 or step[0] < 0 or step[1] <= 0:
                raise ValueError("lr_steps entries must be (epoch >= 0, multiplier > 0)")


@dataclass(frozen=True)
class PruneConfig:
    """Prune/retrain schedule."""

    mode: str = "unstructured"
    pr_per_iter: float = 0.1
    epochs_per_cycle: int = 40
    patience: int = 2
    max_iters: int = 25

    def __post_init__(self):
        if self.mode not in PRUNE_MODES:
            raise ValueError(f"unknown prune mode {self.mode!r}")
        if not (0 < self.pr_per_iter < 1):
            raise ValueError("pr_per_iter must lie in (0, 1)")
        if self.epochs_per_cycle < 1:
            raise ValueError("epochs_per_cycle must be >= 1")
        if self.patience < 0 or self.max_iters < 0:
            raise ValueError("patience and max_iters must be >= 0")


@dataclass
class PruneRecord:
    """One row of the prune/retrain history."""

    iter: int
    prune_ratio: float
    params_remaining: int
    train_nll: float
    val_nll: float
    test_nll: float
    n_evals: int
    seconds: float


@dataclass
class PruneHistory:
    rows: list = field(default_factory=list)

    def append(self, rec: PruneRecord) -> None:
        if self.rows and rec.prune_ratio < self.rows[-1].prune_ratio - 1e-12:
            raise ValueError("cumulative prune ratio must be non-decreasing")
        self.rows.append(rec)

    def to_csv(self, path: str, zero_seconds: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "prune_ratio", "params_remaining", "train_nll",
                        "val_nll", "test_nll", "n_evals", "seconds"])
            for r in self.rows:
                secs = 0.0 if zero_seconds else r.seconds
                w.writerow([r.iter, repr(float(r.prune_ratio)), r.params_remaining,
                            repr(float(r.train_nll)), repr(float(r.val_nll)),
                            repr(float(r.test_nll)), r.n_evals, repr(float(secs))])

    @staticmethod
    def from_csv(path: str) -> "PruneHistory":
        hist = PruneHistory()
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            want = ["iter", "prune_ratio", "params_remaining", "train_nll",
                    "val_nll", "test_nll", "n_evals", "seconds"]
            if header != want:
                raise ValueError(f"unrecognized history header: {header}")
            for row in r:
                hist.append(PruneRecord(
                    iter=int(row[0]), prune_ratio=float(row[1]),
                    params_remaining=int(row[2]), train_nll=float(row[3]),
                    val_nll=float(row[4]), test_nll=float(row[5]),
                    n_evals=int(row[6]), seconds=float(row[7])))
        return hist


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def init(n_params: int) -> "AdamState":
        return AdamState(np.zeros(n_params), np.zeros(n_params), 0)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a given epoch under the fixed-step decay schedule."""
    lr = cfg.lr
    for step_epoch, mult in cfg.lr_steps:
        if epoch >= step_epoch:
            lr *= mult
    return lr


def adam_step(theta, grad, state: AdamState, cfg: TrainConfig, step_index: int,
              lr: float = None, mask: Mask = None):
    """One bias-corrected Adam/AdamW update; returns (new theta, new state).

    adam folds weight decay into the gradient (coupled L2); adamw applies
    theta -= lr * wd * theta before the Adam delta. Masked entries are forced
    back to zero after the update.
    """
    if step_index < 1:
        raise ValueError("step_index must be >= 1")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            f"non-finite gradient at optimizer step {step_index}")
    if lr is None:
        lr = cfg.lr

    g = grad
    if cfg.optimizer == "adam" and cfg.weight_decay != 0.0:
        g = grad + cfg.weight_decay * theta
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1 ** step_index)
    v_hat = v / (1 - cfg.beta2 ** step_index)

    new = np.array(theta, dtype=np.float64, copy=True)
    if cfg.optimizer == "adamw" and cfg.weight_decay != 0.0:
        new -= lr * cfg.weight_decay * new
    new -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if mask is not None:
        new *= mask.bits
    return new, AdamState(m, v, step_index)


# ---------------------------------------------------------------------------
# scoring and masking


def _hidden_layer_indices(spec: MlpSpec):
    # weight layers whose outputs are hidden neurons (all but the last)
    return range(spec.n_layers - 1)


def score_params(params: ParamVector, mask: Mask, spec: MlpSpec, mode: str):
    """Prune scores for the currently unmasked targets.

    unstructured -> (flat_indices, |w|) over unmasked weight entries, in
    ascending flat-index order. structured -> list of
    (layer_index, alive_neuron_indices, row_l1_scores) per hidden layer,
    where a neuron counts as alive while its bias bit is set.
    """
    if mode not in PRUNE_MODES:
        raise ValueError(f"unknown prune mode {mode!r}")
    if mode == "unstructured":
        pool = np.flatnonzero(spec.weight_index_mask() & (mask.bits == 1.0))
        return pool, np.abs(params.values[pool])
    out = []
    layout = spec.param_layout()
    for l in _hidden_layer_indices(spec):
        w_sl, w_shape, b_sl = layout[l]
        live_rows = (params.values[w_sl] * mask.bits[w_sl]).reshape(w_shape)
        alive = np.flatnonzero(mask.bits[b_sl] == 1.0)
        out.append((l, alive, np.abs(live_rows[alive]).sum(axis=1)))
    return out


def apply_prune(params: ParamVector, mask: Mask, spec: MlpSpec, mode: str,
                pr: float) -> Mask:
    """New mask with floor(pr * remaining) lowest-scored targets cleared."""
    if pr == 0:
        return mask.copy()
    if not (0 < pr < 1):
        raise PruneError("pr must lie in [0, 1)")
    new = mask.copy()
    if mode == "unstructured":
        pool, scores = score_params(params, mask, spec, mode)
        if pool.size == 0:
            raise PruneError("no prunable weights remain")
        k = int(math.floor(pr * pool.size))
        if k >= pool.size:
            raise PruneError("prune request would remove every remaining weight")
        if k:
            order = np.argsort(scores, kind="stable")
            new.bits[pool[order[:k]]] = 0.0
        return new

    layout = spec.param_layout()
    for l, alive, scores in score_params(params, mask, spec, mode):
        k = int(math.floor(pr * alive.size))
        if k == 0:
            continue
        if k >= alive.size:
            raise PruneError("prune request would empty a hidden layer")
        order = np.argsort(scores, kind="stable")
        doomed = alive[order[:k]]
        w_sl, w_shape, b_sl = layout[l]
        w_bits = new.bits[w_sl].reshape(w_shape)
        w_bits[doomed, :] = 0.0
        new.bits[b_sl][doomed] = 0.0
        nw_sl, nw_shape, _ = layout[l + 1]
        nw_bits = new.bits[nw_sl].reshape(nw_shape)
        nw_bits[:, doomed] = 0.0
    return new


def sparsity(mask: Mask, spec: MlpSpec, mode: str) -> float:
    """Cumulative prune ratio over the mode's target pool."""
    if mode not in PRUNE_MODES:
        raise ValueError(f"unknown prune mode {mode!r}")
    if mode == "unstructured":
        is_w = spec.weight_index_mask()
        return float(np.mean(mask.bits[is_w] == 0.0))
    layout = spec.param_layout()
    total = 0
    pruned = 0
    for l in _hidden_layer_indices(spec):
        _, _, b_sl = layout[l]
        bits = mask.bits[b_sl]
        total += bits.size
        pruned += int(np.sum(bits == 0.0))
    return pruned / total


# ---------------------------------------------------------------------------
# training loops


def train_cycle(model: cnf.FlowModel, train_points: np.ndarray,
                train_cfg: TrainConfig, epochs: int, cycle_index: int):
    """Train the flow in place for `epochs`.

    Returns (solver rhs evaluations, final AdamState). Batch order and
    Hutchinson noise derive from (seed, cycle, epoch, batch), so a cycle is
    reproducible in isolation. The optimizer state starts fresh and the
    learning-rate schedule starts at epoch 0 (rewinding).
    """
    pts = np.asarray(train_points, dtype=np.float64)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    state = AdamState.init(model.spec.n_params)
    step = 0
    n_evals = 0
    for epoch in range(epochs):
        lr = lr_at(train_cfg, epoch)
        perm = rng.stream(train_cfg.seed, "batch", cycle_index, epoch).permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            xb = pts[perm[start : start + train_cfg.batch_size]]
            noise = rng.stream(train_cfg.seed, "hutch", cycle_index, epoch, start)
            _, grad, ne = cnf.nll_loss_and_grad(model, xb, rng_stream=noise)
            n_evals += ne
            step += 1
            theta, state = adam_step(model.params.values, grad, state, train_cfg,
                                     step, lr=lr, mask=model.mask)
            model.params.values[:] = theta
    return n_evals, state


def _evaluate(model, splits):
    nlls = []
    cost = 0
    for ds in splits:
        val, ne = cnf.nll_with_cost(model, ds.points)
        nlls.append(val)
        cost += ne
    return nlls, cost


def sparse_flow_train(model: cnf.FlowModel, splits, train_cfg: TrainConfig,
                      prune_cfg: PruneConfig, on_iteration=None,
                      start_iter: int = 0, history: PruneHistory = None):
    """Dense warm start, then prune/retrain until validation stalls.

    splits is (train, val, test) datasets. Returns
    (best model, best mask, history, checkpoints) where checkpoints[i] is the
    model copy after iteration start_iter + i (0 = dense warm start) and the
    best iterate is the one with the lowest validation NLL. n_evals per row
    counts both the cycle's training solves and its three NLL evaluations.

    on_iteration(it, model, record, adam_state) fires after each completed
    iteration.
    To resume a killed run, pass the model restored to iteration
    start_iter - 1 plus the history rows up to there; early-stop state is
    recomputed from the rows. If the best iterate predates start_iter the
    returned best model is None and callers reload it from their own
    persistence.
    """
    train_ds, val_ds, test_ds = splits
    history = history if history is not None else PruneHistory()
    checkpoints = []
    ckpt_by_iter = {}
    best_val = math.inf
    best_idx = -1
    stall = 0
    if start_iter > 0:
        if len(history.rows) != start_iter:
            raise ValueError("history does not line up with start_iter")
        finite = [(r.val_nll, r.iter) for r in history.rows
                  if not math.isnan(r.val_nll)]
        if finite:
            best_val, best_idx = min(finite)
            stall = history.rows[-1].iter - best_idx

    for it in range(start_iter, prune_cfg.max_iters + 1):
        t_start = time.perf_counter()
        aborted = False
        n_evals = 0
        adam_state = None
        try:
            if it > 0:
                model.mask = apply_prune(model.params, model.mask, model.spec,
                                         prune_cfg.mode, prune_cfg.pr_per_iter)
                model.params.values *= model.mask.bits
            n_evals, adam_state = train_cycle(model, train_ds.points, train_cfg,
                                              prune_cfg.epochs_per_cycle, it)
        except (NonFiniteGradientError, PruneError, odeint.IntegrationError):
            # abort: record a sentinel row, keep the last good checkpoint
            history.append(PruneRecord(
                iter=it,
                prune_ratio=sparsity(model.mask, model.spec, prune_cfg.mode),
                params_remaining=model.mask.n_active(),
                train_nll=math.nan, val_nll=math.nan, test_nll=math.nan,
                n_evals=n_evals, seconds=time.perf_counter() - t_start))
            aborted = True
        if aborted:
            break

        (tr_nll, va_nll, te_nll), eval_cost = _evaluate(
            model, (train_ds, val_ds, test_ds))
        history.append(PruneRecord(
            iter=it,
            prune_ratio=sparsity(model.mask, model.spec, prune_cfg.mode),
            params_remaining=model.mask.n_active(),
            train_nll=tr_nll, val_nll=va_nll, test_nll=te_nll,
            n_evals=n_evals + eval_cost,
            seconds=time.perf_counter() - t_start))
        checkpoints.append(model.copy())
        ckpt_by_iter[it] = checkpoints[-1]
        if on_iteration is not None:
            on_iteration(it, checkpoints[-1], history.rows[-1], adam_state)

        if va_nll < best_val:
            best_val = va_nll
            best_idx = it
            stall = 0
        elif it > 0:
            stall += 1
            if stall > prune_cfg.patience:
                break

    if not checkpoints and start_iter == 0:
        raise NonFiniteGradientError("training aborted before any checkpoint")
    if best_idx < 0:
        best_idx = history.rows[-1].iter if history.rows else 0
    if best_idx in ckpt_by_iter:
        best = ckpt_by_iter[best_idx].copy()
        return best, best.mask, history, checkpoints
    # best iterate predates this resume window; caller reloads it
    return None, model.mask, history, checkpoints
