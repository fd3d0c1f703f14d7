"""Checkpoint format: round trips and hostile-file handling."""

import json
import math

import numpy as np
import pytest

from flowprune import checkpoint as ck
from flowprune import cnf, config, prune, rng
from flowprune.net import MlpSpec
from flowprune.odeint import SolverConfig


def _make(tmp_path, with_adam=True, history_rows=2):
    cfg = config.load_config(None, kind="gaussians",
                             overrides=["model.layer_sizes=[3,8,2]",
                                        "solver.method=rk4",
                                        "solver.fixed_step=0.25"])
    doc = config.config_to_doc(cfg)
    spec = cfg.model
    params = rng.stream(0, "ckpt").normal((spec.n_params,))
    mask = np.ones(spec.n_params)
    mask[::5] = 0.0
    hist = prune.PruneHistory()
    for i in range(history_rows):
        hist.append(prune.PruneRecord(
            iter=i, prune_ratio=0.1 * i, params_remaining=int(spec.n_params - i),
            train_nll=2.0 - i * 0.1, val_nll=2.1 - i * 0.1,
            test_nll=math.nan if i == 1 else 2.2, n_evals=100 + i, seconds=0.5))
    ckpt = ck.Checkpoint(
        config=doc, iteration=history_rows - 1, params=params, mask=mask,
        adam_m=rng.stream(1, "m").normal((spec.n_params,)) if with_adam else None,
        adam_v=np.abs(rng.stream(2, "v").normal((spec.n_params,))) if with_adam else None,
        adam_t=7 if with_adam else 0,
        history=hist,
        streams={"next_batch": rng.stream(3, "batch", 2, 0).state()})
    path = str(tmp_path / "model.ckpt")
    ck.save_checkpoint(ckpt, path)
    return ckpt, path


def test_round_trip_bit_exact(tmp_path):
    ckpt, path = _make(tmp_path)
    back = ck.load_checkpoint(path)
    assert np.array_equal(back.params, ckpt.params)
    assert np.array_equal(back.mask, ckpt.mask)
    assert np.array_equal(back.adam_m, ckpt.adam_m)
    assert np.array_equal(back.adam_v, ckpt.adam_v)
    assert back.adam_t == 7
    assert back.iteration == ckpt.iteration
    assert back.config == ckpt.config
    assert back.streams == ckpt.streams
    rows, orig = back.history.rows, ckpt.history.rows
    assert len(rows) == len(orig)
    assert rows[0] == orig[0]
    assert math.isnan(rows[1].test_nll) and rows[1].iter == 1


def test_round_trip_without_adam_state(tmp_path):
    ckpt, path = _make(tmp_path, with_adam=False)
    back = ck.load_checkpoint(path)
    assert back.adam_m is None and back.adam_v is None and back.adam_t == 0
    assert np.array_equal(back.params, ckpt.params)


def test_save_is_deterministic(tmp_path):
    ckpt, path = _make(tmp_path)
    other = str(tmp_path / "again.ckpt")
    ck.save_checkpoint(ckpt, other)
    assert open(path, "rb").read() == open(other, "rb").read()


def test_model_from_checkpoint(tmp_path):
    ckpt, path = _make(tmp_path)
    model = ck.model_from_checkpoint(ck.load_checkpoint(path))
    assert np.array_equal(model.params.values, ckpt.params)
    assert np.array_equal(model.mask.bits, ckpt.mask)
    assert model.solver.method == "rk4"
    x = rng.stream(4, "probe").normal((4, 2))
    lp = cnf.log_prob(model, x)
    assert np.all(np.isfinite(lp))


def test_tampered_payload_byte_fails_hash(tmp_path):
    _, path = _make(tmp_path)
    blob = bytearray(open(path, "rb").read())
    blob[-3] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ck.CorruptCheckpointError):
        ck.load_checkpoint(path)


def test_truncated_file(tmp_path):
    _, path = _make(tmp_path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-16])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.load_checkpoint(path)


def test_trailing_garbage(tmp_path):
    _, path = _make(tmp_path)
    with open(path, "ab") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(ck.CorruptCheckpointError):
        ck.load_checkpoint(path)


def test_version_bump_is_distinct_error(tmp_path):
    _, path = _make(tmp_path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    header["format_version"] = 99
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    with pytest.raises(ck.CheckpointVersionError):
        ck.load_checkpoint(path)


def test_unparseable_header(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"\x80\x81 not json\n\x00\x01")
    with pytest.raises(ck.CorruptCheckpointError):
        ck.load_checkpoint(str(path))
    missing = tmp_path / "nope.ckpt"
    with pytest.raises(FileNotFoundError):
        ck.load_checkpoint(str(missing))


def test_header_missing_required_array(tmp_path):
    _, path = _make(tmp_path, with_adam=False)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    header["arrays"] = [["params", header["arrays"][0][1]],
                        ["other", header["arrays"][1][1]]]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
    with pytest.raises(ck.CorruptCheckpointError):
        ck.load_checkpoint(path)


def test_model_from_checkpoint_rejects_size_mismatch(tmp_path):
    ckpt, path = _make(tmp_path)
    loaded = ck.load_checkpoint(path)
    loaded.config["model"]["layer_sizes"] = [3, 16, 2]
    with pytest.raises(ck.CorruptCheckpointError):
        ck.model_from_checkpoint(loaded)
