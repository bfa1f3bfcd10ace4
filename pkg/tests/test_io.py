"""Binary round trips and corruption handling for checkpoints and demos."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from peel.autodiff import ContractViolation
from peel.io import (
    CKPT_MAGIC,
    DEMO_MAGIC,
    load_checkpoint,
    load_demos,
    save_checkpoint,
    save_demos,
)
from peel.world import Trajectory


def make_traj(steps=4, obs_dim=6, act_dim=3, seed=11, success=True):
    rng = np.random.default_rng(seed)
    return Trajectory(rng.standard_normal((steps + 1, obs_dim)).astype(np.float32),
                      rng.standard_normal((steps, act_dim)).astype(np.float32),
                      success, seed)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "enc.w": rng.standard_normal((7, 5)).astype(np.float32),
        "enc.b": rng.standard_normal(5).astype(np.float32),
        "scalar": np.float32(3.25),
    }
    meta = {"kind": "base", "epochs": 12}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tensors, meta)
    loaded, got_meta = load_checkpoint(path)
    assert got_meta == meta
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], np.asarray(tensors[name], np.float32))


def test_checkpoint_preserves_insertion_order(tmp_path):
    names = [f"p{i}" for i in range(20)]
    tensors = {n: np.full(2, i, np.float32) for i, n in enumerate(names)}
    path = tmp_path / "o.ckpt"
    save_checkpoint(path, tensors)
    loaded, _ = load_checkpoint(path)
    assert list(loaded) == names


def test_checkpoint_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(ContractViolation, match="offset 0"):
        load_checkpoint(path)


def test_checkpoint_truncation_reports_offset(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4), np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ContractViolation, match="tensor 'w'|tensor w"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch_rejected(tmp_path):
    path = tmp_path / "v.ckpt"
    save_checkpoint(path, {"w": np.ones(1, np.float32)})
    blob = bytearray(path.read_bytes())
    blob[8] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(ContractViolation, match="version"):
        load_checkpoint(path)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.integers(1, 5), st.integers(0, 10_000))
def test_checkpoint_round_trip_property(ndim, size, seed):
    import tempfile, os

    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, size + 1) for _ in range(ndim))
    arr = rng.standard_normal(shape).astype(np.float32)
    fd, path = tempfile.mkstemp(suffix=".ckpt")
    os.close(fd)
    try:
        save_checkpoint(path, {"x": arr})
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded["x"], arr)
        assert loaded["x"].shape == shape
    finally:
        os.unlink(path)


# -------------------------------------------------------------------- demos


def test_demo_round_trip(tmp_path):
    demos = [make_traj(steps=s, seed=s) for s in (3, 7, 1)]
    path = tmp_path / "demos.demo"
    save_demos(path, demos)
    loaded = load_demos(path)
    assert len(loaded) == 3
    for a, b in zip(demos, loaded):
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert a.success == b.success and a.seed == b.seed
        assert b.steps == a.steps


def test_empty_demo_file_refused(tmp_path):
    with pytest.raises(ContractViolation):
        save_demos(tmp_path / "e.demo", [])


def test_demo_magic_and_truncation_errors(tmp_path):
    path = tmp_path / "d.demo"
    save_demos(path, [make_traj()])
    blob = path.read_bytes()
    (tmp_path / "m.demo").write_bytes(CKPT_MAGIC + blob[8:])
    with pytest.raises(ContractViolation, match="magic"):
        load_demos(tmp_path / "m.demo")
    (tmp_path / "cut.demo").write_bytes(blob[:-10])
    with pytest.raises(ContractViolation, match="offset"):
        load_demos(tmp_path / "cut.demo")


def test_demo_shape_consistency_enforced_on_save(tmp_path):
    bad = make_traj()
    bad.actions = bad.actions[:-1]
    with pytest.raises(ContractViolation):
        save_demos(tmp_path / "bad.demo", [bad])


def test_demo_header_records_dims(tmp_path):
    import struct

    path = tmp_path / "h.demo"
    save_demos(path, [make_traj(obs_dim=9, act_dim=2)])
    blob = path.read_bytes()
    assert blob[:8] == DEMO_MAGIC
    version, count, obs_dim, act_dim = struct.unpack("<IIII", blob[8:24])
    assert (version, count, obs_dim, act_dim) == (1, 1, 9, 2)
