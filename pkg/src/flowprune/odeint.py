"""Initial-value-problem integrators and gradients through the solve.

Three integrators: fixed-step Euler and classic RK4 (ceil(|t1-t0|/h) equal
steps), and adaptive Dormand-Prince 4(5) with the standard 7-stage FSAL
tableau, mixed absolute/relative RMS error norm, PI step-size control, the
classical automatic initial step, and steps clamped to [1e-8, |t1-t0|].

Two gradient paths:
  backprop_bptt     exact derivative of the discrete fixed-step solver map
                    (reverse-mode through every stage; refuses dopri5)
  backprop_adjoint  integrates the augmented system [y; a; g_theta] backward
                    with da/dt = -a^T df/dy, dg/dt = -a^T df/dtheta, same
                    solver family and tolerances as the forward pass

Gradient paths need a vector field that can also evaluate VJPs. Any object
with the ODEFunction shape below works; plain callables are enough for
integrate() itself. The loss cotangent may be passed as an array or as a
callable y1 -> cotangent when the loss is a function of the terminal state.

State arrays may have any shape; norms reduce over all components. A batch
solved as one stacked state shares its step-size control, the standard
continuous-flow practice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("euler", "rk4", "dopri5")
BACKPROPS = ("bptt", "adjoint")

MIN_STEP = 1e-8


class IntegrationError(RuntimeError):
    """Solver failure; carries the time at which integration broke down."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (at t = {t:.6g})")
        self.t = t


class ODEFunction:
    """Interface for vector fields with gradients.

    __call__(y, t)            -> dy/dt, same shape as y
    with_cache(y, t)          -> (dy/dt, cache) for later vjp reuse
    vjp(y, t, w, cache=None)  -> (w^T df/dy (shape of y), w^T df/dtheta (P,))
    n_theta                   -> parameter count for the gradient vector
    """

    n_theta = 0

    def __call__(self, y, t):
        raise NotImplementedError

    def with_cache(self, y, t):
        return self(y, t), None

    def vjp(self, y, t, w, cache=None):
        raise NotImplementedError


@dataclass
class SolverConfig:
    """Integrator selection, tolerances, and time interval."""

    method: str = "dopri5"
    t0: float = 0.0
    t1: float = 1.0
    fixed_step: float = 0.1
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 100_000
    backprop: str = "adjoint"
    adjoint_seminorm: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.backprop not in BACKPROPS:
            raise ValueError(f"unknown backprop {self.backprop!r}")
        if self.t1 == self.t0:
            raise ValueError("t1 must differ from t0")
        if self.fixed_step <= 0:
            raise ValueError("fixed_step must be positive")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def reversed(self) -> "SolverConfig":
        cfg = SolverConfig(**self.__dict__)
        cfg.t0, cfg.t1 = self.t1, self.t0
        return cfg


# ---------------------------------------------------------------------------
# fixed-step methods


def _fixed_grid(cfg: SolverConfig):
    span = cfg.t1 - cfg.t0
    n = max(1, int(np.ceil(abs(span) / cfg.fixed_step)))
    return n, span / n


def _euler_step(rhs, y, t, h, counter):
    counter[0] += 1
    return y + h * rhs(y, t)


def _rk4_step(rhs, y, t, h, counter):
    counter[0] += 4
    k1 = rhs(y, t)
    k2 = rhs(y + (h / 2) * k1, t + h / 2)
    k3 = rhs(y + (h / 2) * k2, t + h / 2)
    k4 = rhs(y + h * k3, t + h)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# Dormand-Prince 4(5), FSAL

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_DP_E = _DP_B5 - _DP_B4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_ORDER = 5.0


def _error_norm(err, y_old, y_new, rtol, atol, select):
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    r = err / scale
    if select is not None:
        r = r[select]
    return float(np.sqrt(np.mean(r * r)))


def _initial_step(rhs, y0, f0, t0, direction, rtol, atol, counter):
    """Hairer's automatic initial step size (order 5)."""
    scale = atol + rtol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = rhs(y1, t0 + h0 * direction)
    counter[0] += 1
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / _ORDER)
    return min(100 * h0, h1)


def _dopri5(rhs, y0, cfg: SolverConfig, select=None):
    t = cfg.t0
    span = cfg.t1 - cfg.t0
    direction = 1.0 if span > 0 else -1.0
    remaining = abs(span)
    counter = [0]

    y = np.asarray(y0, dtype=np.float64).copy()
    k1 = rhs(y, t)
    counter[0] += 1
    if not np.all(np.isfinite(k1)):
        raise IntegrationError("vector field not finite at the initial state", t)

    h = _initial_step(rhs, y, k1, t, direction, cfg.rtol, cfg.atol, counter)
    h = min(max(h, MIN_STEP), abs(span))

    err_prev = 1.0
    ks = [None] * 7
    steps = 0
    while remaining > 1e-14 * max(1.0, abs(cfg.t1)):
        if steps >= cfg.max_steps:
            raise IntegrationError(f"exceeded max_steps = {cfg.max_steps}", t)
        steps += 1
        h = min(h, remaining)
        hs = h * direction

        ks[0] = k1
        for i in range(1, 7):
            yi = y + hs * sum(_DP_A[i][j] * ks[j] for j in range(i))
            ks[i] = rhs(yi, t + _DP_C[i] * hs)
            counter[0] += 1
        y_new = y + hs * sum(_DP_B5[i] * ks[i] for i in range(6))  # b5[6] = 0
        # the 7th stage was evaluated at y_new (a7 row equals b5): FSAL
        err_vec = hs * sum(_DP_E[i] * ks[i] for i in range(7))

        finite = np.all(np.isfinite(y_new))
        err = (
            _error_norm(err_vec, y, y_new, cfg.rtol, cfg.atol, select)
            if finite
            else np.inf
        )

        if err <= 1.0:
            t = cfg.t1 - direction * (remaining - h) if remaining - h > 0 else cfg.t1
            remaining -= h
            y = y_new
            k1 = ks[6]  # FSAL reuse
            factor = _SAFETY * err ** (-0.7 / _ORDER) * err_prev ** (0.4 / _ORDER) if err > 0 else _MAX_FACTOR
            factor = min(max(factor, _MIN_FACTOR), _MAX_FACTOR)
            err_prev = max(err, 1e-10)
        else:
            if not finite and h <= MIN_STEP * 1.01:
                raise IntegrationError("state became non-finite", t)
            factor = (
                min(max(_SAFETY * err ** (-1.0 / _ORDER), _MIN_FACTOR), 1.0)
                if np.isfinite(err)
                else _MIN_FACTOR
            )
        h = min(max(h * factor, MIN_STEP), abs(span))
    return y, counter[0]


# ---------------------------------------------------------------------------
# public entry points


def integrate(rhs, y0, cfg: SolverConfig, _select=None):
    """Solve y' = rhs(y, t) from (t0, y0) to t1. Returns (y(t1), n_evals)."""
    y0 = np.asarray(y0, dtype=np.float64)
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("initial state not finite", cfg.t0)
    if cfg.method == "dopri5":
        return _dopri5(rhs, y0, cfg, select=_select)

    n, h = _fixed_grid(cfg)
    if n > cfg.max_steps:
        raise IntegrationError(f"fixed grid needs {n} steps > max_steps", cfg.t0)
    step = _euler_step if cfg.method == "euler" else _rk4_step
    counter = [0]
    y = y0.copy()
    t = cfg.t0
    for i in range(n):
        y = step(rhs, y, t, h, counter)
        t = cfg.t0 + (i + 1) * h
        if not np.all(np.isfinite(y)):
            raise IntegrationError("state became non-finite", t)
    return y, counter[0]


def integrate_path(rhs, y0, cfg: SolverConfig, ts):
    """States at each knot of `ts` (ts[0] must equal cfg.t0). Fresh solve per
    segment; returns (list of states, n_evals)."""
    ts = [float(t) for t in ts]
    if abs(ts[0] - cfg.t0) > 1e-12:
        raise ValueError("ts[0] must equal cfg.t0")
    states = [np.asarray(y0, dtype=np.float64).copy()]
    total = 0
    y = states[0]
    for a, b in zip(ts[:-1], ts[1:]):
        seg = SolverConfig(**{**cfg.__dict__, "t0": a, "t1": b})
        y, n = integrate(rhs, y, seg)
        total += n
        states.append(y)
    return states, total


# ---------------------------------------------------------------------------
# gradient path 1: exact reverse-mode through the fixed-step computation


def backprop_bptt(func: ODEFunction, y0, cfg: SolverConfig, bar_y1):
    """Exact gradients of the discrete solver map.

    Returns (y1, bar_y0, bar_theta, n_evals). Only fixed-step methods unroll
    exactly; dopri5 is refused (its step controller is not differentiable).
    Memory stays flat: step-start states are recorded on the way out and each
    step's stages are recomputed with caches during the reverse sweep.
    """
    if cfg.method not in ("euler", "rk4"):
        raise ValueError("backprop_bptt requires a fixed-step method (euler or rk4)")
    y0 = np.asarray(y0, dtype=np.float64)
    n, h = _fixed_grid(cfg)
    if n > cfg.max_steps:
        raise IntegrationError(f"fixed grid needs {n} steps > max_steps", cfg.t0)

    counter = [0]
    ys = [y0.copy()]
    y = y0.copy()
    for i in range(n):
        t = cfg.t0 + i * h
        if cfg.method == "euler":
            y = _euler_step(func, y, t, h, counter)
        else:
            y = _rk4_step(func, y, t, h, counter)
        if not np.all(np.isfinite(y)):
            raise IntegrationError("state became non-finite", t + h)
        ys.append(y.copy())
    y1 = ys[-1]

    if callable(bar_y1):
        bar_y1 = bar_y1(y1)
    bar_y = np.asarray(bar_y1, dtype=np.float64).copy()
    bar_theta = np.zeros(func.n_theta)

    for i in range(n - 1, -1, -1):
        t = cfg.t0 + i * h
        yi = ys[i]
        if cfg.method == "euler":
            counter[0] += 1
            _, cache = func.with_cache(yi, t)
            gy, gth = func.vjp(yi, t, h * bar_y, cache)
            bar_theta += gth
            bar_y = bar_y + gy
        else:
            counter[0] += 4
            k1, c1 = func.with_cache(yi, t)
            x2 = yi + (h / 2) * k1
            k2, c2 = func.with_cache(x2, t + h / 2)
            x3 = yi + (h / 2) * k2
            k3, c3 = func.with_cache(x3, t + h / 2)
            x4 = yi + h * k3
            _k4, c4 = func.with_cache(x4, t + h)

            bk1 = (h / 6) * bar_y
            bk2 = (h / 3) * bar_y
            bk3 = (h / 3) * bar_y
            bk4 = (h / 6) * bar_y

            g4, th4 = func.vjp(x4, t + h, bk4, c4)
            bk3 = bk3 + h * g4
            g3, th3 = func.vjp(x3, t + h / 2, bk3, c3)
            bk2 = bk2 + (h / 2) * g3
            g2, th2 = func.vjp(x2, t + h / 2, bk2, c2)
            bk1 = bk1 + (h / 2) * g2
            g1, th1 = func.vjp(yi, t, bk1, c1)

            bar_theta += th1 + th2 + th3 + th4
            bar_y = bar_y + g1 + g2 + g3 + g4
    return y1, bar_y, bar_theta, counter[0]


# ---------------------------------------------------------------------------
# gradient path 2: continuous adjoint


def backprop_adjoint(func: ODEFunction, y0, cfg: SolverConfig, bar_y1):
    """Adjoint sensitivity gradients.

    Runs the forward solve, then integrates [y; a; g_theta] from t1 back to
    t0 with the same solver family and tolerances. Only the terminal forward
    state is kept (y is re-integrated backward). Returns
    (y1, bar_y0, bar_theta, n_evals); n_evals counts forward rhs calls plus
    backward augmented-rhs calls.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    y1, n_fwd = integrate(func, y0, cfg)

    if callable(bar_y1):
        bar_y1 = bar_y1(y1)
    shape = y1.shape
    m = y1.size
    n_theta = func.n_theta
    s0 = np.concatenate(
        [y1.reshape(-1), np.asarray(bar_y1, dtype=np.float64).reshape(-1), np.zeros(n_theta)]
    )

    def aug_rhs(s, t):
        y = s[:m].reshape(shape)
        a = s[m : 2 * m].reshape(shape)
        dy, cache = func.with_cache(y, t)
        gy, gth = func.vjp(y, t, a, cache)
        return np.concatenate([dy.reshape(-1), -gy.reshape(-1), -gth])

    back = cfg.reversed()
    select = None
    if cfg.method == "dopri5" and cfg.adjoint_seminorm and n_theta > 0:
        select = np.zeros(s0.size, dtype=bool)
        select[: 2 * m] = True
    s_final, n_bwd = integrate(aug_rhs, s0, back, _select=select)

    bar_y0 = s_final[m : 2 * m].reshape(shape)
    bar_theta = s_final[2 * m :].copy()
    return y1, bar_y0, bar_theta, n_fwd + n_bwd
