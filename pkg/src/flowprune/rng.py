"""Deterministic counter-based random numbers with named substreams.

Every random choice in the library (parameter init, batch shuffling,
Hutchinson noise, Hessian probes, dataset sampling) draws from a `Stream`
addressed by a 64-bit key. Keys are derived from a user seed plus a path of
string/integer tokens, so independent consumers get independent streams and
any draw can be reproduced bit-for-bit on any platform from (seed, path,
counter) alone. No global state.

The generator is the splitmix64 construction: output_i = mix64(key + i * GAMMA)
where GAMMA is the golden-ratio increment and mix64 is the murmur-style
avalanche finalizer. It is counter-based, so batches of outputs vectorize as a
single uint64 array pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)

_MIX_MUL_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_MUL_2 = np.uint64(0x94D049BB133111EB)
_SHIFT_30 = np.uint64(30)
_SHIFT_27 = np.uint64(27)
_SHIFT_31 = np.uint64(31)
_SHIFT_11 = np.uint64(11)
_U64_ONE = np.uint64(1)

# FNV-1a parameters, used only to fold token strings into stream keys.
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)

_INV_2_53 = float(2.0**-53)


def mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """Avalanche finalizer; bijective on uint64, wraps modulo 2^64."""
    x = np.uint64(x) if np.isscalar(x) or np.ndim(x) == 0 else x
    with np.errstate(over="ignore"):
        x = x ^ (x >> _SHIFT_30)
        x = x * _MIX_MUL_1
        x = x ^ (x >> _SHIFT_27)
        x = x * _MIX_MUL_2
        x = x ^ (x >> _SHIFT_31)
    return x


def _token_u64(token) -> np.uint64:
    if isinstance(token, str):
        h = _FNV_OFFSET
        with np.errstate(over="ignore"):
            for b in token.encode("utf-8"):
                h = (h ^ np.uint64(b)) * _FNV_PRIME
        return h
    if isinstance(token, (bool, np.bool_)):
        return np.uint64(int(token))
    if isinstance(token, (int, np.integer)):
        return np.uint64(int(token) % (1 << 64))
    raise TypeError(f"stream tokens must be str or int, got {type(token).__name__}")


@dataclass
class Stream:
    """One addressable random stream: 64-bit key plus a draw counter."""

    key: int
    counter: int = 0

    def derive(self, *tokens) -> "Stream":
        """Child stream keyed by this stream's key and the token path."""
        k = np.uint64(self.key % (1 << 64))
        with np.errstate(over="ignore"):
            for i, tok in enumerate(tokens):
                k = mix64(k + GOLDEN_GAMMA)
                k = k ^ mix64(_token_u64(tok) + np.uint64(i + 1) * GOLDEN_GAMMA)
        return Stream(key=int(mix64(k)))

    def state(self) -> dict:
        return {"key": int(self.key), "counter": int(self.counter)}

    @staticmethod
    def from_state(state: dict) -> "Stream":
        return Stream(key=int(state["key"]), counter=int(state["counter"]))

    # raw draws ----------------------------------------------------------

    def uint64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs, advancing the counter by n."""
        if n < 0:
            raise ValueError("n must be >= 0")
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            base = np.uint64(self.key % (1 << 64)) + idx * GOLDEN_GAMMA
        return mix64(base)

    # distributions ------------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        """IID uniforms on [0, 1) with 53-bit resolution."""
        m = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.uint64(m) >> _SHIFT_11).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()) -> np.ndarray:
        """IID standard normals via Box-Muller; u1 shifted into (0, 1]."""
        m = int(np.prod(shape, dtype=np.int64)) if shape else 1
        half = (m + 1) // 2
        u1 = 1.0 - (self.uint64(half) >> _SHIFT_11).astype(np.float64) * _INV_2_53
        u2 = (self.uint64(half) >> _SHIFT_11).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        ang = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(ang), r * np.sin(ang)])[:m]
        return z.reshape(shape) if shape else float(z[0])

    def rademacher(self, shape=()) -> np.ndarray:
        """IID +-1 values as float64."""
        m = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = (self.uint64(m) >> _SHIFT_31) & _U64_ONE
        z = 2.0 * bits.astype(np.float64) - 1.0
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n IID draws from {0, ..., bound-1} (53-bit uniform scaling)."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        u = self.uniform((n,))
        return np.minimum((u * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random sort keys."""
        return np.argsort(self.uniform((n,)), kind="stable").astype(np.int64)


def stream(seed: int, *tokens) -> Stream:
    """Root entry point: a stream for `tokens` under a 64-bit seed."""
    with np.errstate(over="ignore"):
        base = np.uint64(int(seed) % (1 << 64)) + GOLDEN_GAMMA
    root = Stream(key=int(mix64(base)))
    return root.derive(*tokens) if tokens else root
