import numpy as np
import pytest

from spherelab.dataset import (
    FixedDataset,
    IdxBadMagicError,
    IdxCountMismatchError,
    IdxTruncatedError,
    MnistSet,
    SphereConfig,
    load_idx,
    make_training_set,
    sample_batch,
    sample_sphere,
    write_idx_images,
    write_idx_labels,
)
from spherelab.rng import RngStream


def test_config_validation():
    with pytest.raises(ValueError):
        SphereConfig(n=1)
    with pytest.raises(ValueError):
        SphereConfig(n=10, R=1.0)
    with pytest.raises(ValueError):
        SphereConfig(n=10, R=0.9)


def test_samples_land_on_a_shell():
    cfg = SphereConfig(n=20, seed=3)
    stream = RngStream(cfg.seed).child(6)
    for _ in range(50):
        s = sample_sphere(cfg, stream)
        r = np.linalg.norm(s.x)
        target = 1.0 if s.label == 0 else cfg.R
        assert abs(r - target) <= 1e-9
        assert s.label in (0, 1)


def test_batch_samples_land_on_shells():
    cfg = SphereConfig(n=500, seed=5)
    xs, labels = sample_batch(cfg, RngStream(5), 1000)
    norms = np.linalg.norm(xs, axis=1)
    assert np.abs(norms[labels == 0] - 1.0).max() <= 1e-9
    assert np.abs(norms[labels == 1] - cfg.R).max() <= 1e-9


def test_inner_coordinate_variance_matches_one_over_n():
    # Coordinates of a uniform point on the unit shell have variance 1/n.
    cfg = SphereConfig(n=500, seed=11)
    xs, labels = sample_batch(cfg, RngStream(11), 10**5)
    inner = xs[labels == 0]
    var = inner.var(axis=0).mean()
    assert abs(var - 1.0 / cfg.n) < 0.05 / cfg.n


def test_fixed_seed_reproduces_dataset():
    cfg = SphereConfig(n=10, seed=123)
    a = make_training_set(cfg, 500)
    b = make_training_set(cfg, 500)
    assert (a.xs == b.xs).all()
    assert (a.labels == b.labels).all()


def test_training_set_size_and_shells():
    cfg = SphereConfig(n=8, seed=1)
    ds = make_training_set(cfg, 1000)
    assert ds.N == 1000 and len(ds) == 1000
    norms = np.linalg.norm(ds.xs, axis=1)
    on_inner = np.abs(norms - 1.0) <= 1e-9
    on_outer = np.abs(norms - cfg.R) <= 1e-9
    assert (on_inner | on_outer).all()
    s = ds[17]
    assert s.label in (0, 1) and s.x.shape == (8,)


def test_class_balance_binomial():
    # Class counts are binomial(N, 1/2): stay within 4 sigma of N/2.
    cfg = SphereConfig(n=16, seed=2)
    ds = make_training_set(cfg, 10**6)
    outer = int(ds.labels.sum())
    assert abs(outer - 500_000) < 4 * np.sqrt(10**6 / 4)


def test_different_seeds_give_disjoint_sets():
    a = make_training_set(SphereConfig(n=6, seed=1), 200)
    b = make_training_set(SphereConfig(n=6, seed=2), 200)
    rows_a = {a.xs[i].tobytes() for i in range(a.N)}
    rows_b = {b.xs[i].tobytes() for i in range(b.N)}
    assert not rows_a & rows_b


def test_rotational_symmetry_of_the_mean():
    # Mean of m uniform shell points has coordinates ~ N(0, 1/(n m)).
    cfg = SphereConfig(n=50, seed=9)
    xs, labels = sample_batch(cfg, RngStream(9), 10**5)
    inner = xs[labels == 0]
    m = inner.shape[0]
    bound = 5.0 * np.sqrt(1.0 / (cfg.n * m)) * np.sqrt(cfg.n)
    assert np.linalg.norm(inner.mean(axis=0)) <= bound


def test_dataset_cache_round_trip(tmp_path):
    ds = make_training_set(SphereConfig(n=7, R=1.25, seed=77), 64)
    path = tmp_path / "ds.bin"
    ds.save(path)
    back = FixedDataset.load(path)
    assert (back.xs == ds.xs).all()
    assert (back.labels == ds.labels).all()
    assert back.config == ds.config


# ---------------------------------------------------------------------------
# IDX


def _write_pair(tmp_path, images, labels):
    ip = tmp_path / "imgs.idx"
    lp = tmp_path / "labs.idx"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    return ip, lp


def test_idx_hand_built_fixture(tmp_path):
    images = np.array(
        [[[0, 51], [102, 255]], [[255, 0], [0, 128]]], dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, labels)
    ds = load_idx(ip, lp)
    assert ds.images.shape == (2, 4)
    np.testing.assert_allclose(
        ds.images,
        np.array([[0, 51, 102, 255], [255, 0, 0, 128]]) / 255.0)
    assert list(ds.labels) == [3, 7]
    assert (ds.rows, ds.cols) == (2, 2)


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(bytes.fromhex("DEADBEEF") + b"\x00" * 16)
    lp = tmp_path / "labs.idx"
    write_idx_labels(lp, np.zeros(1, dtype=np.uint8))
    with pytest.raises(IdxBadMagicError) as exc:
        load_idx(p, lp)
    assert exc.value.offset == 0


def test_idx_truncated_payload(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, np.zeros(3, dtype=np.uint8))
    raw = ip.read_bytes()
    ip.write_bytes(raw[:-5])
    with pytest.raises(IdxTruncatedError):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    images = np.zeros((3, 2, 2), dtype=np.uint8)
    ip, lp = _write_pair(tmp_path, images, np.zeros(4, dtype=np.uint8))
    with pytest.raises(IdxCountMismatchError):
        load_idx(ip, lp)


def test_idx_round_trip_bit_identical(tmp_path):
    stream = RngStream(31)
    images = (stream.uniforms(5 * 4 * 3).reshape(5, 4, 3) * 256).astype(np.uint8)
    labels = (stream.uniforms(5) * 10).astype(np.uint8)
    ip, lp = _write_pair(tmp_path, images, labels)
    first_i, first_l = ip.read_bytes(), lp.read_bytes()
    ds = load_idx(ip, lp)
    ip2 = tmp_path / "again.idx"
    lp2 = tmp_path / "again-labels.idx"
    write_idx_images(ip2, (ds.images * 255.0).round().astype(np.uint8).reshape(5, 4, 3))
    write_idx_labels(lp2, ds.labels.astype(np.uint8))
    assert ip2.read_bytes() == first_i
    assert lp2.read_bytes() == first_l
