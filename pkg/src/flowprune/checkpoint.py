"""Single-file checkpoints: a JSON header line plus a float64 payload.

Layout: one UTF-8 JSON line holding the format version, the full experiment
config document, iteration index, optimizer step count, PRNG stream states,
history rows, the payload's array directory (name, length), and its sha256;
then the arrays themselves, concatenated little-endian float64. Loading
verifies structure, version, length, and hash with distinct errors so a
caller can tell truncation from tampering from a format bump.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .cnf import FlowModel
from .net import Mask, ParamVector
from .prune import PruneHistory, PruneRecord

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Base for unreadable checkpoints."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this reader."""


class CorruptCheckpointError(CheckpointError):
    """Malformed header or payload hash mismatch."""


class TruncatedCheckpointError(CheckpointError):
    """Payload shorter than the header's array directory promises."""


@dataclass
class Checkpoint:
    """Everything needed to restore a training run at an iteration."""

    config: dict
    iteration: int
    params: np.ndarray
    mask: np.ndarray
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    adam_t: int = 0
    history: PruneHistory = field(default_factory=PruneHistory)
    streams: dict = field(default_factory=dict)


def _history_rows(history: PruneHistory) -> list:
    return [[r.iter, r.prune_ratio, r.params_remaining, r.train_nll,
             r.val_nll, r.test_nll, r.n_evals, r.seconds]
            for r in history.rows]


def _history_from_rows(rows) -> PruneHistory:
    h = PruneHistory()
    for r in rows:
        h.append(PruneRecord(int(r[0]), float(r[1]), int(r[2]), float(r[3]),
                             float(r[4]), float(r[5]), int(r[6]), float(r[7])))
    return h


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    arrays = [("params", ckpt.params), ("mask", ckpt.mask)]
    if ckpt.adam_m is not None:
        arrays.append(("adam_m", ckpt.adam_m))
    if ckpt.adam_v is not None:
        arrays.append(("adam_v", ckpt.adam_v))
    blocks = [np.asarray(a, dtype=np.float64).reshape(-1) for _, a in arrays]
    payload = b"".join(b.astype("<f8").tobytes() for b in blocks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config,
        "iteration": int(ckpt.iteration),
        "adam_t": int(ckpt.adam_t),
        "streams": {k: {"key": int(v["key"]), "counter": int(v["counter"])}
                    for k, v in ckpt.streams.items()},
        "history": _history_rows(ckpt.history),
        "arrays": [[name, b.size] for (name, _), b in zip(arrays, blocks)],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        line = fh.readline()
        rest = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise CorruptCheckpointError(f"{path}: header missing format_version")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header['format_version']} "
            f"(this reader supports {FORMAT_VERSION})")
    directory = header.get("arrays", [])
    expect = 8 * sum(int(n) for _, n in directory)
    if len(rest) < expect:
        raise TruncatedCheckpointError(
            f"{path}: payload is {len(rest)} bytes, header promises {expect}")
    if len(rest) > expect:
        raise CorruptCheckpointError(f"{path}: {len(rest) - expect} trailing bytes")
    if hashlib.sha256(rest).hexdigest() != header.get("sha256"):
        raise CorruptCheckpointError(f"{path}: payload hash mismatch")

    out = {}
    off = 0
    for name, n in directory:
        n = int(n)
        out[name] = np.frombuffer(rest, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
    missing = {"params", "mask"} - set(out)
    if missing:
        raise CorruptCheckpointError(f"{path}: missing arrays {sorted(missing)}")
    return Checkpoint(
        config=header.get("config", {}),
        iteration=int(header.get("iteration", 0)),
        params=out["params"],
        mask=out["mask"],
        adam_m=out.get("adam_m"),
        adam_v=out.get("adam_v"),
        adam_t=int(header.get("adam_t", 0)),
        history=_history_from_rows(header.get("history", [])),
        streams=header.get("streams", {}),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> FlowModel:
    """Rebuild the flow exactly as configured when the checkpoint was cut."""
    cfg = config_mod.config_from_doc(ckpt.config)
    spec = cfg.model
    if ckpt.params.size != spec.n_params:
        raise CorruptCheckpointError(
            f"checkpoint holds {ckpt.params.size} params, config wants {spec.n_params}")
    if not math.isfinite(float(np.sum(ckpt.params))):
        raise CorruptCheckpointError("checkpoint parameters are not finite")
    return FlowModel(spec=spec, params=ParamVector(ckpt.params.copy(), spec),
                     mask=Mask(ckpt.mask.copy()), solver=cfg.solver,
                     divergence=cfg.divergence)
