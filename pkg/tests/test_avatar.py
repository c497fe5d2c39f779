"""Avatar data model and binary persistence."""

import io
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lca.avatar import (AvatarFile, AvatarFormatError, Camera, DrivingSignal,
                        GaussianDeltas, GaussianSet, apply_deltas, default_rig,
                        load_avatar, pack_arrays, save_avatar, unpack_arrays,
                        validate)


def make_gaussians(rng, n=16):
    q = rng.normal(0, 1, (n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(color=rng.uniform(0, 1, (n, 3)),
                       position=rng.normal(0, 1, (n, 3)),
                       opacity=rng.uniform(0, 1, n),
                       rotation=q,
                       log_scale=rng.uniform(-5, -2, (n, 3)))


def make_avatar(seed=0, with_node=False):
    rng = np.random.default_rng(seed)
    rig = default_rig(32, seed=seed)
    g = make_gaussians(rng, 64)
    node = None
    if with_node:
        node = {"node_positions": rng.normal(0, 1, (8, 3)).astype(np.float32),
                "nn_idx": rng.integers(0, 8, (64, 4)).astype(np.uint32)}
    return AvatarFile(rig=rig, canonical=g,
                      tokens=rng.normal(0, 1, (32, 16)).astype(np.float32),
                      pose_weights={"w": rng.normal(0, 1, (16, 8)).astype(np.float32)},
                      skin_weights={"weights": rng.uniform(0, 1, (64, 9)).astype(np.float32)},
                      node_graph=node,
                      meta={"note": np.arange(3, dtype=np.int32)})


# -- camera / rig / deltas ---------------------------------------------------

def test_camera_rejects_non_rotation():
    with pytest.raises(ValueError):
        Camera(fx=50, fy=50, cx=16, cy=16, width=32, height=32,
               rotation=np.eye(3) * 2.0, translation=np.zeros(3))


def test_look_at_projects_target_to_center():
    cam = Camera.look_at([0, 1, 3], [0, 1, 0], width=64, height=48)
    v = cam.world_to_view(np.array([[0.0, 1.0, 0.0]]))[0]
    assert np.allclose(v[:2], 0, atol=1e-12)
    assert v[2] > 0


def test_default_rig_shape_contract():
    rig = default_rig(256, seed=0)
    assert rig.parents[0] == -1
    assert rig.rest_points.shape == (256, 3)
    assert rig.pose_dim == 3 * rig.num_joints + 6
    labels = rig.point_labels.astype(int)
    assert np.all(np.diff(labels) >= 0)  # face block first, then body
    assert (labels == 0).sum() == 128


def test_driving_signal_validation():
    rig = default_rig(16)
    with pytest.raises(ValueError):
        DrivingSignal(np.zeros(rig.pose_dim), np.zeros(8), np.zeros(5))
    with pytest.raises(ValueError):
        DrivingSignal(np.full(rig.pose_dim, np.nan), np.zeros(8), np.zeros(6))
    s = DrivingSignal.rest(rig)
    assert s.concat().shape == (rig.pose_dim + 8 + 6,)


def test_apply_deltas_zero_is_identity():
    rng = np.random.default_rng(0)
    g = make_gaussians(rng)
    out = apply_deltas(g, GaussianDeltas.zero(g.count))
    for f in ("color", "position", "opacity", "rotation", "log_scale"):
        assert np.array_equal(getattr(out, f), getattr(g, f)), f


def test_apply_deltas_never_touches_opacity():
    rng = np.random.default_rng(1)
    g = make_gaussians(rng)
    d = GaussianDeltas(d_color=rng.normal(0, 1, (g.count, 3)),
                       d_position=rng.normal(0, 1, (g.count, 3)),
                       d_rotation=rng.normal(0, 1, (g.count, 4)),
                       d_log_scale=rng.normal(0, 1, (g.count, 3)))
    out = apply_deltas(g, d)
    assert out.opacity is not g.opacity or np.array_equal(out.opacity, g.opacity)
    assert np.array_equal(out.opacity, g.opacity)
    assert np.all(out.color >= 0) and np.all(out.color <= 1)
    norms = np.linalg.norm(out.rotation, axis=1)
    assert np.allclose(norms, 1, atol=1e-5)


def test_validate_names_field_and_index():
    rng = np.random.default_rng(2)
    g = make_gaussians(rng)
    g.opacity[3] = 1.5
    g.rotation[5] = 0
    msgs = validate(g)
    assert any("3" in m and "opacity" in m for m in msgs)
    assert any("5" in m and "quaternion" in m for m in msgs)
    assert validate(make_gaussians(rng)) == []


# -- array packing -----------------------------------------------------------

@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_pack_unpack_roundtrip(seed):
    rng = np.random.default_rng(seed)
    arrays = {}
    for i in range(rng.integers(1, 6)):
        dtype = rng.choice([np.float32, np.float64, np.uint32, np.int32, np.uint8])
        shape = tuple(rng.integers(0, 5, rng.integers(0, 3)))
        arrays[f"k{i}"] = (rng.uniform(0, 100, shape) * 1).astype(dtype)
    out = unpack_arrays(pack_arrays(arrays))
    assert set(out) == set(arrays)
    for k in arrays:
        assert out[k].dtype == arrays[k].dtype
        assert out[k].shape == arrays[k].shape
        assert np.array_equal(out[k], arrays[k])


def test_pack_is_order_independent():
    a = {"x": np.arange(3), "y": np.ones(2, np.float32)}
    b = {"y": np.ones(2, np.float32), "x": np.arange(3)}
    assert pack_arrays({k: a[k] for k in ["x", "y"]}) == \
        pack_arrays({k: b[k] for k in ["y", "x"]})


# -- avatar files ------------------------------------------------------------

def test_save_load_roundtrip_bitexact(tmp_path):
    av = make_avatar(3, with_node=True)
    p = tmp_path / "a.lcav"
    save_avatar(av, p)
    av2 = load_avatar(p)
    assert av == av2
    # second save is byte-identical
    p2 = tmp_path / "b.lcav"
    save_avatar(av2, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(AvatarFormatError, match="magic"):
        load_avatar(p)


def test_load_rejects_future_version(tmp_path):
    av = make_avatar(4)
    p = tmp_path / "a.lcav"
    save_avatar(av, p)
    data = bytearray(p.read_bytes())
    struct.pack_into("<I", data, 4, 99)
    p.write_bytes(bytes(data))
    with pytest.raises(AvatarFormatError, match="version 99"):
        load_avatar(p)


def test_corruption_is_rejected_naming_the_section(tmp_path):
    av = make_avatar(5)
    p = tmp_path / "a.lcav"
    save_avatar(av, p)
    data = bytearray(p.read_bytes())
    # find the GAUS section and flip one payload byte
    idx = data.find(b"GAUS")
    assert idx > 0
    (length,) = struct.unpack_from("<Q", data, idx + 4)
    data[idx + 12 + length // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(AvatarFormatError, match="GAUS"):
        load_avatar(p)


def test_truncation_names_the_section(tmp_path):
    av = make_avatar(6)
    p = tmp_path / "a.lcav"
    save_avatar(av, p)
    data = p.read_bytes()
    p.write_bytes(data[: len(data) - 10])
    with pytest.raises(AvatarFormatError, match="truncated"):
        load_avatar(p)


def test_missing_required_section(tmp_path):
    av = make_avatar(7)
    p = tmp_path / "a.lcav"
    save_avatar(av, p)
    data = bytearray(p.read_bytes())
    # rename TOKS so a required section goes missing
    idx = data.find(b"TOKS")
    data[idx:idx + 4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(AvatarFormatError, match="TOKS"):
        load_avatar(p)
