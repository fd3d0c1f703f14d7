"""Curvature analysis of the NLL objective at a converged model.

Hessian-vector products come from central finite differences of the exact
gradient, which costs two gradient evaluations per product and is exact on
quadratics. The objective is re-evaluated with exact divergence on a
fixed-step RK4 solve so it is deterministic and smooth: an adaptive solver
changing its step count under perturbation would inject noise into the
differences.

Extremal eigenvalues come from power iteration (with a spectral shift to
recover the other end of the spectrum), the trace from a Hutchinson
estimate over Rademacher probes. Every probe and every product is masked on
the way in and the way out, so pruned coordinates contribute and receive
exactly zero and the analysis lives on the active subspace.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import cnf, prune, rng
from .odeint import SolverConfig


@dataclass(frozen=True)
class HessianReport:
    """One model's curvature summary; kappa is |lambda_max| / |lambda_min|."""

    tag: str
    prune_ratio: float
    nll: float
    lambda_max: float
    lambda_min: float
    trace: float
    se_trace: float
    kappa: float
    n_probes: int
    power_iters: int
    fd_step: float
    seed: int


class NllObjective:
    """Deterministic NLL over a fixed batch, differentiated exactly.

    Wraps a flow with an RK4/BPTT/exact-divergence copy so both the value
    and the gradient are smooth functions of theta. The stored theta and
    mask bits define the point and subspace under analysis.
    """

    def __init__(self, model: cnf.FlowModel, batch, solver_step: float = 0.2):
        solver = SolverConfig(method="rk4", t0=model.solver.t0,
                              t1=model.solver.t1, fixed_step=solver_step,
                              backprop="bptt")
        self._model = cnf.FlowModel(spec=model.spec, params=model.params.copy(),
                                    mask=model.mask.copy(), solver=solver,
                                    divergence=cnf.EXACT)
        self.batch = np.asarray(batch, dtype=np.float64)
        self.bits = self._model.mask.bits.copy()
        self.theta = self._model.effective_theta()

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        self._model.params.values[:] = theta * self.bits
        _, grad, _ = cnf.nll_loss_and_grad(self._model, self.batch)
        return grad

    def value(self, theta: np.ndarray) -> float:
        self._model.params.values[:] = theta * self.bits
        nll, _ = cnf.nll_with_cost(self._model, self.batch)
        return nll


class QuadraticObjective:
    """L(theta) = 0.5 theta' H theta with a known symmetric H.

    Stands in for a model wherever this module expects one; every routine
    can be checked against the explicit spectrum. A 1-D hess is taken as
    the diagonal.
    """

    def __init__(self, hess, theta=None, mask=None):
        H = np.asarray(hess, dtype=np.float64)
        if H.ndim == 1:
            H = np.diag(H)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError("hess must be square")
        if not np.allclose(H, H.T):
            raise ValueError("hess must be symmetric")
        self.hess = H
        n = H.shape[0]
        self.bits = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
        self.theta = (np.zeros(n) if theta is None
                      else np.asarray(theta, dtype=np.float64)) * self.bits

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return (self.hess @ (theta * self.bits)) * self.bits

    def value(self, theta: np.ndarray) -> float:
        t = theta * self.bits
        return float(0.5 * t @ self.hess @ t)


def _as_objective(model, batch, solver_step: float):
    if hasattr(model, "gradient") and hasattr(model, "bits"):
        return model
    return NllObjective(model, batch, solver_step=solver_step)


def _hvp(obj, v: np.ndarray, fd_step: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != obj.theta.shape:
        raise ValueError("direction does not match the parameter vector")
    if not np.any(v):
        raise ValueError("hvp direction is zero")
    v = v * obj.bits
    vmax = np.abs(v).max()
    if vmax == 0.0:  # supported only on pruned coordinates
        return np.zeros_like(v)
    eps = fd_step * (1.0 + np.abs(obj.theta).max()) / vmax
    g_hi = obj.gradient(obj.theta + eps * v)
    g_lo = obj.gradient(obj.theta - eps * v)
    return ((g_hi - g_lo) / (2.0 * eps)) * obj.bits


def hvp(model, batch, v, fd_step: float = 1e-4, solver_step: float = 0.2):
    """H v by central differences of the gradient; masked both ways.

    The step is eps = fd_step * (1 + ||theta||_inf) / ||v||_inf, so the
    parameter perturbation has a scale-free magnitude.
    """
    return _hvp(_as_objective(model, batch, solver_step), v, fd_step)


def _power(obj, matvec, iters: int, tol: float, seed: int, token: str):
    """(rayleigh, unit vector, converged) for the dominant eigenpair."""
    n = obj.theta.size
    v = rng.stream(seed, "hessian", "power", token).normal((n,)) * obj.bits
    nv = np.linalg.norm(v)
    if nv == 0.0:  # nothing is active
        return 0.0, v, True
    v = v / nv
    lam = math.inf
    for _ in range(iters):
        w = matvec(v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:  # v is (numerically) in the kernel
            return 0.0, v, True
        v = w / nw
        if abs(lam_new - lam) < tol:
            return lam_new, v, True
        lam = lam_new
    return lam, v, False


def top_eigenvalue(model, batch, iters: int = 100, tol: float = 1e-9,
                   seed: int = 0, fd_step: float = 1e-4,
                   solver_step: float = 0.2):
    """Signed eigenvalue of largest magnitude and its witness vector.

    Power iteration converges to the dominant eigenvalue; a warning is
    issued (and the last estimate returned) if successive Rayleigh
    quotients never agree to tol within the iteration budget.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    obj = _as_objective(model, batch, solver_step)
    lam, vec, ok = _power(obj, lambda v: _hvp(obj, v, fd_step), iters, tol,
                          seed, "dominant")
    if not ok:
        warnings.warn(f"power iteration did not converge in {iters} iterations; "
                      f"returning the last estimate {lam:.6g}", RuntimeWarning)
    return lam, vec


def min_eigenvalue(model, batch, lambda_ref: float, iters: int = 100,
                   tol: float = 1e-9, seed: int = 0, fd_step: float = 1e-4,
                   solver_step: float = 0.2) -> float:
    """Smallest eigenvalue via the shifted map v -> lambda_ref v - H v.

    With lambda_ref at or above the spectral radius the shifted map has a
    non-negative spectrum whose dominant eigenvalue is
    lambda_ref - lambda_min(H).
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    obj = _as_objective(model, batch, solver_step)

    def shifted(v):
        return lambda_ref * v - _hvp(obj, v, fd_step)

    lam, _, ok = _power(obj, shifted, iters, tol, seed, "shifted")
    if not ok:
        warnings.warn(f"power iteration did not converge in {iters} iterations; "
                      f"returning the last estimate", RuntimeWarning)
    return float(lambda_ref - lam)


def hessian_trace(model, batch, n_probes: int = 32, seed: int = 0,
                  fd_step: float = 1e-4, solver_step: float = 0.2):
    """(Hutchinson trace estimate, standard error) over Rademacher probes.

    Probes are masked, so the estimate covers only active coordinates; for
    a diagonal Hessian every probe returns the exact trace and the SE is 0.
    """
    if n_probes < 2:
        raise ValueError("n_probes must be >= 2")
    obj = _as_objective(model, batch, solver_step)
    n = obj.theta.size
    if not np.any(obj.bits):
        return 0.0, 0.0
    samples = np.empty(n_probes)
    for i in range(n_probes):
        u = rng.stream(seed, "hessian", "probe", i).uniform((n,))
        v = np.where(u < 0.5, -1.0, 1.0) * obj.bits
        samples[i] = v @ _hvp(obj, v, fd_step)
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n_probes))


def hessian_report(model, batch, tag: str = "model", prune_ratio: float = None,
                   n_probes: int = 32, fd_step: float = 1e-4,
                   power_iters: int = 60, tol: float = 1e-9, seed: int = 0,
                   solver_step: float = 0.2) -> HessianReport:
    """Assemble (nll, lambda_max, lambda_min, trace, kappa) for one model.

    The dominant signed eigenvalue seeds a spectral shift that recovers the
    opposite end of the spectrum, so both extremes are reported whichever
    sign dominates. kappa = |lambda_max| / |lambda_min|.
    """
    obj = _as_objective(model, batch, solver_step)
    matvec = lambda v: _hvp(obj, v, fd_step)

    lam_dom, _, ok1 = _power(obj, matvec, power_iters, tol, seed, "dominant")
    rho = abs(lam_dom)
    if lam_dom >= 0:
        lam_max = lam_dom
        lam_shift, _, ok2 = _power(obj, lambda v: rho * v - matvec(v),
                                   power_iters, tol, seed, "shifted")
        lam_min = rho - lam_shift
    else:
        lam_min = lam_dom
        lam_shift, _, ok2 = _power(obj, lambda v: rho * v + matvec(v),
                                   power_iters, tol, seed, "shifted")
        lam_max = lam_shift - rho
    if not (ok1 and ok2):
        warnings.warn("power iteration did not converge within the budget; "
                      "the report carries the last estimates", RuntimeWarning)

    trace, se = hessian_trace(obj, batch, n_probes=n_probes, seed=seed,
                              fd_step=fd_step, solver_step=solver_step)
    nll = obj.value(obj.theta)
    kappa = abs(lam_max) / abs(lam_min) if lam_min != 0.0 else math.inf
    if prune_ratio is None:
        if hasattr(model, "mask"):
            prune_ratio = prune.sparsity(model.mask, model.spec, "unstructured")
        else:
            prune_ratio = 0.0
    return HessianReport(tag=tag, prune_ratio=float(prune_ratio), nll=float(nll),
                         lambda_max=float(lam_max), lambda_min=float(lam_min),
                         trace=trace, se_trace=se, kappa=float(kappa),
                         n_probes=n_probes, power_iters=power_iters,
                         fd_step=fd_step, seed=seed)


CSV_HEADER = ["tag", "prune_ratio", "nll", "lambda_max", "lambda_min",
              "trace", "kappa", "n_probes", "se_trace"]


def normalize_reports(reports) -> list:
    """Curvature columns rescaled by the least-pruned row.

    lambda_max, lambda_min, trace, and kappa divide by the reference row's
    values so the dense model reads 1.0 everywhere; nll and the probe
    diagnostics stay raw (an NLL ratio has no useful reading). A zero
    reference entry maps to nan rather than raising.
    """
    if not reports:
        return []
    ref = min(reports, key=lambda r: r.prune_ratio)
    out = []
    for r in reports:
        scaled = {}
        for key in ("lambda_max", "lambda_min", "trace", "kappa"):
            denom = getattr(ref, key)
            scaled[key] = getattr(r, key) / denom if denom != 0 else math.nan
        out.append(replace(r, **scaled))
    return out


def reports_to_csv(reports, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow([r.tag, repr(float(r.prune_ratio)), repr(float(r.nll)),
                        repr(float(r.lambda_max)), repr(float(r.lambda_min)),
                        repr(float(r.trace)), repr(float(r.kappa)),
                        r.n_probes, repr(float(r.se_trace))])


def reports_from_csv(path: str) -> list:
    """Rows back as dicts keyed by the CSV schema (not full reports)."""
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != CSV_HEADER:
            raise ValueError(f"unrecognized hessian CSV header: {header}")
        for row in r:
            rec = dict(zip(header, row))
            for k in header[1:]:
                rec[k] = float(rec[k])
            rec["n_probes"] = int(rec["n_probes"])
            out.append(rec)
    return out
