"""The MLP vector field f(z, t, theta) and its derivative machinery.

The network is a plain fully connected stack. Time enters by concatenation:
the input is [z; t], so the first layer has width D + 1. The final layer is
linear. Parameters live in one flat float64 vector laid out as
(W_1, b_1, W_2, b_2, ...) with W stored row-major as (out, in).

Everything downstream (ODE solvers, flow gradients, Hessian probes) is built
from four hand-rolled passes over this stack:

  forward        f = s_L,            s_l = a_{l-1} W_l^T + b_l, a_l = act(s_l)
  vjp            cotangent w  ->  w^T df/dz and w^T df/dtheta
  jvp            tangent v    ->  (df/dz) v      (used for divergence terms)
  vjp_aug        reverse pass through forward AND jvp chains jointly; needed
                 because the loss depends on the divergence, whose own
                 derivative brings in second derivatives of the activation.

The jvp supports several tangent "channels" at once: exact divergence at
D = 2 uses the two basis tangents, the Hutchinson estimator uses one noise
tangent per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import rng

ACTIVATIONS = ("sigmoid", "tanh", "relu", "softplus")
TIME_MODES = ("concat",)


# ---------------------------------------------------------------------------
# specs and parameter containers


@dataclass(frozen=True)
class MlpSpec:
    """Architecture record: layer widths, nonlinearity, time conditioning."""

    layer_sizes: tuple
    activation: str = "tanh"
    time_mode: str = "concat"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output widths")
        if any(s < 1 for s in sizes):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_mode not in TIME_MODES:
            raise ValueError(f"unknown time_mode {self.time_mode!r}")

    @property
    def data_dim(self) -> int:
        """D of the attached task; input width is D + 1 (concat time)."""
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_shapes(self) -> list:
        """[(out_width, in_width)] per layer."""
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(self.n_layers)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def param_layout(self) -> list:
        """[(w_slice, w_shape, b_slice)] per layer over the flat vector."""
        layout = []
        off = 0
        for out_w, in_w in self.layer_shapes():
            w_sl = slice(off, off + out_w * in_w)
            off += out_w * in_w
            b_sl = slice(off, off + out_w)
            off += out_w
            layout.append((w_sl, (out_w, in_w), b_sl))
        return layout

    def weight_index_mask(self) -> np.ndarray:
        """Boolean (n_params,) marking weight entries (biases False)."""
        is_w = np.zeros(self.n_params, dtype=bool)
        for w_sl, _, _ in self.param_layout():
            is_w[w_sl] = True
        return is_w


@dataclass
class ParamVector:
    """Flat parameter vector tied to an MlpSpec layout."""

    values: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.spec.n_params:
            raise ValueError(
                f"parameter vector length {self.values.size} does not match "
                f"spec ({self.spec.n_params} params)"
            )

    def unpack(self) -> list:
        """[(W_l view (out,in), b_l view (out,))] without copying."""
        return [
            (self.values[w_sl].reshape(w_shape), self.values[b_sl])
            for w_sl, w_shape, b_sl in self.spec.param_layout()
        ]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.spec)


@dataclass
class Mask:
    """Binary connection pattern aligned with a ParamVector."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.float64).reshape(-1)
        if not np.all((self.bits == 0.0) | (self.bits == 1.0)):
            raise ValueError("mask bits must be 0 or 1")

    @staticmethod
    def ones(spec: MlpSpec) -> "Mask":
        return Mask(np.ones(spec.n_params))

    def n_active(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> "Mask":
        return Mask(self.bits.copy())


def mlp_init(spec: MlpSpec, seed: int) -> ParamVector:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, seed-reproducible."""
    values = np.zeros(spec.n_params)
    s = rng.stream(seed, "init")
    for (w_sl, (out_w, in_w), _b_sl) in spec.param_layout():
        bound = 1.0 / np.sqrt(in_w)
        values[w_sl] = (s.uniform((out_w * in_w,)) * 2.0 - 1.0) * bound
    return ParamVector(values, spec)


def apply_mask(params: ParamVector, mask: Mask) -> ParamVector:
    """Elementwise product; idempotent."""
    if mask.bits.size != params.values.size:
        raise ValueError("mask length does not match parameter vector")
    return ParamVector(params.values * mask.bits, params.spec)


# ---------------------------------------------------------------------------
# activations: value, first and second derivative (as functions of the
# pre-activation s; the value a is passed in where it speeds things up)


def _act_forward(name: str, s: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return expit(s)
    if name == "tanh":
        return np.tanh(s)
    if name == "relu":
        return np.maximum(s, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, s)
    raise ValueError(f"unknown activation {name!r}")


def _act_d1(name: str, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (s > 0.0).astype(np.float64)
    if name == "softplus":
        return expit(s)
    raise ValueError(f"unknown activation {name!r}")


def _act_d2(name: str, s: np.ndarray, a: np.ndarray, d1: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return d1 * (1.0 - 2.0 * a)
    if name == "tanh":
        return -2.0 * a * d1
    if name == "relu":
        return np.zeros_like(s)
    if name == "softplus":
        sig = d1  # softplus' = sigmoid
        return sig * (1.0 - sig)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# fast internal passes over (spec, flat theta); batch-first arrays


def _unpack(spec: MlpSpec, theta: np.ndarray) -> list:
    return [
        (theta[w_sl].reshape(w_shape), theta[b_sl])
        for w_sl, w_shape, b_sl in spec.param_layout()
    ]


def forward_cached(spec: MlpSpec, theta: np.ndarray, z: np.ndarray, t: float):
    """f(z, t) for a batch z (B, D); returns (f (B, D), cache).

    The cache holds activations and pre-activations of every layer and is
    consumed by the vjp/jvp passes below.
    """
    B = z.shape[0]
    a = np.empty((B, z.shape[1] + 1))
    a[:, :-1] = z
    a[:, -1] = t
    layers = _unpack(spec, theta)
    acts = [a]       # a_0 .. a_{L-1}
    pres = []        # s_1 .. s_L
    name = spec.activation
    for li, (W, b) in enumerate(layers):
        s = a @ W.T + b
        pres.append(s)
        if li < len(layers) - 1:
            a = _act_forward(name, s)
            acts.append(a)
    f = pres[-1]
    return f, {"acts": acts, "pres": pres, "layers": layers}


def jvp_from_cache(spec: MlpSpec, cache: dict, v: np.ndarray):
    """Tangent pass: (df/dz) v for tangent channels v (C, B, D).

    Time tangent is zero (divergence differentiates in z only). Returns
    (Jv (C, B, D), jvp_cache) where the cache stores the tangent chain for
    the second-order reverse pass.
    """
    layers = cache["layers"]
    acts, pres = cache["acts"], cache["pres"]
    name = spec.activation
    C, B, D = v.shape
    u = np.zeros((C, B, D + 1))
    u[:, :, :-1] = v
    us = [u]         # u_0 .. u_{L-1}
    ps = []          # p_l = u_{l-1} W_l^T, l = 1 .. L
    d1s = []         # activation slopes per hidden layer
    for li, (W, _b) in enumerate(layers):
        p = u @ W.T
        ps.append(p)
        if li < len(layers) - 1:
            d1 = _act_d1(name, pres[li], acts[li + 1])
            d1s.append(d1)
            u = d1[None, :, :] * p
            us.append(u)
    Jv = ps[-1]
    return Jv, {"us": us, "ps": ps, "d1s": d1s}


def vjp_aug_from_cache(
    spec: MlpSpec,
    cache: dict,
    jvp_cache: dict | None,
    bar_f: np.ndarray | None,
    bar_u: np.ndarray | None,
):
    """Joint reverse pass through the forward chain and the jvp chains.

    bar_f (B, D) is the cotangent on f; bar_u (C, B, D) the cotangent on the
    jvp outputs Jv. Either may be None. Differentiating the tangent chain
    u_l = act'(s_l) * (W_l u_{l-1}) needs act'' and contributes to the same
    W/b/z gradients, which is why the two passes are fused.

    Returns (bar_z (B, D), bar_theta (n_params,), summed over batch for theta).
    """
    layers = cache["layers"]
    acts, pres = cache["acts"], cache["pres"]
    name = spec.activation
    layout = spec.param_layout()
    bar_theta = np.zeros(spec.n_params)
    L = len(layers)

    B = acts[0].shape[0]
    D = spec.data_dim
    if bar_f is None:
        bar_f = np.zeros((B, D))
    with_u = bar_u is not None and jvp_cache is not None

    g = bar_f                    # cotangent on a_l (or s_L at the top)
    gu = bar_u if with_u else None   # cotangent on u_l (C, B, width)
    us = jvp_cache["us"] if with_u else None
    ps = jvp_cache["ps"] if with_u else None
    d1s = jvp_cache["d1s"] if with_u else None

    for li in range(L - 1, -1, -1):
        W, _b = layers[li]
        w_sl, w_shape, b_sl = layout[li]
        if li == L - 1:
            s_bar = g
            if with_u:
                p_bar = gu
        else:
            d1 = d1s[li] if with_u else _act_d1(name, pres[li], acts[li + 1])
            s_bar = g * d1
            if with_u:
                d2 = _act_d2(name, pres[li], acts[li + 1], d1)
                # u_l = d1 * p_l: gradient splits into the d1 path (through
                # s_l, needs act'') and the p_l path
                s_bar = s_bar + np.einsum("cbj,cbj->bj", gu, ps[li]) * d2
                p_bar = gu * d1[None, :, :]
        bar_W = s_bar.T @ acts[li]
        if with_u:
            bar_W = bar_W + np.einsum("cbo,cbi->oi", p_bar, us[li])
        bar_theta[w_sl] += bar_W.reshape(-1)
        bar_theta[b_sl] += s_bar.sum(axis=0)
        g = s_bar @ W
        if with_u:
            gu = p_bar @ W
    bar_z = g[:, :-1]
    return bar_z, bar_theta


# ---------------------------------------------------------------------------
# public single/batch wrappers (spec-facing API)


def _as_batch(z) -> tuple:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return z[None, :], True
    if z.ndim == 2:
        return z, False
    raise ValueError("z must be a vector (D,) or a batch (B, D)")


def _check_dims(spec: MlpSpec, z2: np.ndarray):
    if z2.shape[1] != spec.data_dim:
        raise ValueError(
            f"input dimension {z2.shape[1]} does not match network D = {spec.data_dim}"
        )


def mlp_forward(spec: MlpSpec, params: ParamVector, z, t: float):
    """f([z; t]) through the layer stack; final layer linear."""
    z2, squeeze = _as_batch(z)
    _check_dims(spec, z2)
    f, _ = forward_cached(spec, params.values, z2, float(t))
    return f[0] if squeeze else f


def mlp_vjp(spec: MlpSpec, params: ParamVector, z, t: float, cotangent):
    """(cotangent^T df/dz, cotangent^T df/dtheta), exact reverse accumulation.

    For batch inputs the parameter gradient is summed over the batch and the
    input gradient is per sample.
    """
    z2, squeeze = _as_batch(z)
    _check_dims(spec, z2)
    w2, _ = _as_batch(cotangent)
    if w2.shape != z2.shape:
        raise ValueError("cotangent shape must match f output shape")
    f, cache = forward_cached(spec, params.values, z2, float(t))
    bar_z, bar_theta = vjp_aug_from_cache(spec, cache, None, w2, None)
    return (bar_z[0] if squeeze else bar_z), bar_theta


def mlp_jvp(spec: MlpSpec, params: ParamVector, z, t: float, tangent):
    """(df/dz) tangent, exact forward-mode accumulation (z direction only)."""
    z2, squeeze = _as_batch(z)
    _check_dims(spec, z2)
    v2, _ = _as_batch(tangent)
    if v2.shape != z2.shape:
        raise ValueError("tangent shape must match input shape")
    _, cache = forward_cached(spec, params.values, z2, float(t))
    Jv, _ = jvp_from_cache(spec, cache, v2[None, :, :])
    return Jv[0, 0] if squeeze else Jv[0]


def jacobian_input(spec: MlpSpec, params: ParamVector, z, t: float):
    """Exact df/dz as a (D, D) matrix (or (B, D, D) for a batch)."""
    z2, squeeze = _as_batch(z)
    _check_dims(spec, z2)
    D = spec.data_dim
    _, cache = forward_cached(spec, params.values, z2, float(t))
    basis = np.zeros((D, z2.shape[0], D))
    for i in range(D):
        basis[i, :, i] = 1.0
    Jv, _ = jvp_from_cache(spec, cache, basis)
    # Jv[c, b, :] is J @ e_c, i.e. column c of J
    jac = np.transpose(Jv, (1, 2, 0))
    return jac[0] if squeeze else jac
