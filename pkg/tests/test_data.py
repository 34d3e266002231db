import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rmarn import data
from rmarn.afr import FeatureSequence
from rmarn.errors import (
    ArgumentError,
    BadMagicError,
    ManifestError,
    NonFiniteError,
    ParseError,
    PayloadLengthError,
    VersionMismatchError,
)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- RMFT --------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_feature_round_trip_bit_exact(tokens):
    back = data.decode_features(data.encode_features(tokens))
    assert back.tobytes() == tokens.astype("<f4").tobytes()


def test_feature_file_size_and_read(tmp_path):
    seq = FeatureSequence(np.arange(12, dtype=np.float32).reshape(3, 4), "text", "x")
    path = tmp_path / "x.rmft"
    data.write_features(seq, path)
    assert path.stat().st_size == 16 + 48
    back = data.read_features(path, "pointcloud", "y")
    assert back.modality == "pointcloud" and back.id == "y"
    np.testing.assert_array_equal(back.tokens, seq.tokens)


def test_feature_errors():
    good = data.encode_features(np.ones((2, 2), np.float32))
    with pytest.raises(BadMagicError):
        data.decode_features(b"XXXX" + good[4:])
    with pytest.raises(VersionMismatchError):
        data.decode_features(good[:4] + struct.pack("<I", 7) + good[8:])
    with pytest.raises(PayloadLengthError):
        data.decode_features(good[:-1])
    with pytest.raises(PayloadLengthError):
        data.decode_features(good[:10])
    bad = bytearray(good)
    bad[16:20] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteError):
        data.decode_features(bytes(bad))
    with pytest.raises(NonFiniteError):
        data.encode_features(np.array([[np.inf]]))


# -- manifests and synthetic data ------------------------------------------------

def test_generator_split_counts(tmp_path):
    m = data.generate_synthetic(tmp_path, n_pairs=100, seed=3)
    assert m.counts() == {"train": 80, "val": 10, "test": 10}


def test_generator_is_byte_deterministic(tmp_path):
    data.generate_synthetic(tmp_path / "a", n_pairs=12, seed=7)
    data.generate_synthetic(tmp_path / "b", n_pairs=12, seed=7)
    data.generate_synthetic(tmp_path / "c", n_pairs=12, seed=8)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_generator_matched_pairs_are_more_aligned():
    texts, points, _ = data.synthesize(data.SyntheticSpec(n_pairs=200, noise=0.1, seed=0))
    matched, mismatched = data.pooled_cosines(texts, points)
    assert matched > mismatched + 0.3


def test_generator_shapes():
    spec = data.SyntheticSpec(n_pairs=10, s_t=(2, 3), s_p=(5, 5), h_t=6, h_p=4, seed=1)
    texts, points, splits = data.synthesize(spec)
    assert all(2 <= t.length <= 3 and t.width == 6 for t in texts)
    assert all(p.length == 5 and p.width == 4 for p in points)
    assert sorted(set(splits)) == ["test", "train", "val"]


@pytest.mark.parametrize("bad", [dict(n_pairs=1), dict(noise=-0.1), dict(s_t=(0, 3)), dict(s_p=(9, 4)),
                                 dict(h_t=0), dict(latent_dim=0)])
def test_generator_rejects_bad_arguments(bad):
    with pytest.raises(ArgumentError):
        data.synthesize(data.SyntheticSpec(**bad))


def test_manifest_round_trip_and_validation(tmp_path):
    m = data.generate_synthetic(tmp_path, n_pairs=10, seed=0)
    loaded = data.load_manifest(tmp_path / "manifest.json")
    assert loaded.entries == m.entries and loaded.meta == json.loads(json.dumps(m.meta))
    data.save_manifest(loaded, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "manifest.json").read_bytes()
    texts, points = data.load_split(loaded, "train")
    assert [t.id for t in texts] == [e.id for e in loaded.split("train")]
    assert texts[0].modality == "text" and points[0].modality == "pointcloud"


def test_manifest_errors(tmp_path):
    data.generate_synthetic(tmp_path, n_pairs=10, seed=0)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    dup = dict(raw, entries=raw["entries"] + raw["entries"][:1])
    (tmp_path / "dup.json").write_text(json.dumps(dup))
    with pytest.raises(ManifestError, match="duplicate"):
        data.load_manifest(tmp_path / "dup.json")
    (tmp_path / raw["entries"][0]["text_feature_path"]).unlink()
    with pytest.raises(ManifestError, match="missing"):
        data.load_manifest(tmp_path / "manifest.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ManifestError):
        data.load_manifest(tmp_path / "bad.json")
    odd = dict(raw, entries=[dict(raw["entries"][1], split="holdout")])
    (tmp_path / "odd.json").write_text(json.dumps(odd))
    with pytest.raises(ManifestError, match="split"):
        data.load_manifest(tmp_path / "odd.json")
    only_val = dict(raw, entries=[dict(raw["entries"][1], split="val")])
    (tmp_path / "only_val.json").write_text(json.dumps(only_val))
    with pytest.raises(ManifestError, match="train"):
        data.load_manifest(tmp_path / "only_val.json", check_files=False, require_splits=("train",))


# -- featurizers -------------------------------------------------------------------

def test_text_featurizer():
    seq = data.featurize_text("a b a", 8, seed=1)
    assert seq.length == 3
    np.testing.assert_array_equal(seq.tokens[0], seq.tokens[2])
    assert not np.array_equal(seq.tokens[0], seq.tokens[1])
    assert data.featurize_text("blue and white porcelain", 8).length == 4
    assert data.featurize_text("Blue, white; porcelain!", 8).length == 3
    np.testing.assert_array_equal(data.featurize_text("x y", 8, 5).tokens, data.featurize_text("x y", 8, 5).tokens)
    assert not np.array_equal(data.featurize_text("x", 8, 5).tokens, data.featurize_text("x", 8, 6).tokens)
    with pytest.raises(ArgumentError):
        data.featurize_text("  ,; ", 8)


def test_pointcloud_featurizer():
    cloud = np.random.default_rng(0).standard_normal((10, 3))
    seq = data.featurize_pointcloud(cloud, 6, n_sample=25, seed=2)
    assert seq.tokens.shape == (25, 6)
    single = data.featurize_pointcloud([[0.3, -1.0, 2.0]], 6, n_sample=5)
    assert np.all(single.tokens == single.tokens[0])
    origin = data.featurize_pointcloud([[0.0, 0.0, 0.0]], 6, n_sample=2)
    assert np.all(origin.tokens == 0)
    rgb = data.featurize_pointcloud(np.ones((4, 6)), 6, n_sample=4)
    assert rgb.width == 6
    a = data.featurize_pointcloud(cloud, 6, 8, seed=3).tokens
    assert a.tobytes() == data.featurize_pointcloud(cloud, 6, 8, seed=3).tokens.tobytes()
    with pytest.raises(ArgumentError):
        data.featurize_pointcloud(np.zeros((0, 3)), 6, 4)


def test_xyz_parser(tmp_path):
    path = tmp_path / "c.xyz"
    path.write_text("# header\n0 0 0\n1,2,3\n\n4 5 6  # trailing\n")
    np.testing.assert_array_equal(data.load_point_cloud(path), [[0, 0, 0], [1, 2, 3], [4, 5, 6]])
    path.write_text("0 0 0\n1 2\n")
    with pytest.raises(ParseError) as err:
        data.load_point_cloud(path)
    assert err.value.line == 2
    path.write_text("0 0 0\n1 2 x\n")
    with pytest.raises(ParseError, match=":2:"):
        data.load_point_cloud(path)


PLY = """ply
format ascii 1.0
comment made by hand
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 1
property list uchar int vertex_indices
end_header
0 0 0 255 0 0
1 0 0 0 255 0
0 1 0 0 0 255
3 0 1 2
"""


def test_ply_parser(tmp_path):
    path = tmp_path / "c.ply"
    path.write_text(PLY)
    pts = data.load_point_cloud(path)
    assert pts.shape == (3, 6)
    np.testing.assert_allclose(pts[1], [1, 0, 0, 0, 1, 0])
    path.write_text(PLY.replace("0 1 0 0 0 255\n3 0 1 2\n", ""))
    with pytest.raises(ParseError) as err:
        data.load_point_cloud(path)
    assert err.value.line == 16
    path.write_text(PLY.replace("1 0 0 0 255 0", "1 0 zz 0 255 0"))
    with pytest.raises(ParseError) as err:
        data.load_point_cloud(path)
    assert err.value.line == 15
    path.write_text(PLY.replace("format ascii 1.0", "format binary_little_endian 1.0"))
    with pytest.raises(ParseError, match="ASCII"):
        data.load_point_cloud(path)
