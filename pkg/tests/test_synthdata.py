from __future__ import annotations

import numpy as np
import pytest

from discon import synthdata as sd


def _dist_to_centers(tokens, centers):
    diff = tokens[:, None, :] - centers[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def test_degenerate_single_mode_collapses_to_center():
    spec = sd.MixtureSpec(n_modes=1, token_dim=3, seq_len=4, separation=6.0, sigma=1e-12)
    ds = sd.generate(spec, 20, seed=0)
    center = ds.spec.centers[0]
    assert np.abs(ds.tokens - center).max() < 1e-9


def test_min_pairwise_center_distance_meets_separation():
    spec = sd.MixtureSpec(n_modes=8, token_dim=2, seq_len=16, separation=10.0, sigma=1.0,
                          n_classes=4)
    ds = sd.generate(spec, 5, seed=1)
    assert sd._min_pairwise_distance(ds.spec.centers) >= 10.0


def test_generate_deterministic_bitwise():
    spec = sd.default_spec()
    a = sd.generate(spec, 50, seed=42)
    b = sd.generate(spec, 50, seed=42)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.mode_ids, b.mode_ids)
    assert np.array_equal(a.class_labels, b.class_labels)
    c = sd.generate(spec, 50, seed=43)
    assert not np.array_equal(a.tokens, c.tokens)


def test_validation_rejects_bad_specs():
    with pytest.raises(ValueError):
        sd.MixtureSpec(n_modes=4, token_dim=2, seq_len=8, separation=5.0, sigma=1.0)
    with pytest.raises(ValueError):
        sd.MixtureSpec(n_modes=4, token_dim=2, seq_len=8, separation=8.0, sigma=0.0)
    with pytest.raises(ValueError):
        sd.MixtureSpec(n_modes=4, token_dim=2, seq_len=8, separation=8.0, sigma=1.0,
                       mode_shape="cube")
    with pytest.raises(ValueError):
        sd.MixtureSpec(n_modes=4, token_dim=2, seq_len=8, separation=8.0, sigma=1.0,
                       n_classes=2, class_to_modes={0: (0, 1), 1: (1, 2, 3)})
    with pytest.raises(ValueError):
        sd.generate(sd.default_spec(), 0, seed=0)


def test_split_balanced_two_classes_exact():
    spec = sd.MixtureSpec(n_modes=2, token_dim=2, seq_len=4, separation=8.0, sigma=1.0,
                          n_classes=2)
    ds = sd.generate(spec, 400, seed=3)
    # force perfectly balanced labels, then check the 50/50 split per class
    ds.class_labels = np.tile([0, 1], 200).astype(np.int32)
    train, val = sd.split(ds, 0.5, seed=0)
    for part in (train, val):
        counts = np.bincount(part.class_labels, minlength=2)
        assert counts.tolist() == [100, 100]


def test_split_is_disjoint_partition():
    ds = sd.generate(sd.default_spec(), 201, seed=5)
    train, val = sd.split(ds, 0.7, seed=1)
    assert len(train) + len(val) == len(ds)
    combined = np.concatenate([train.tokens, val.tokens]).reshape(-1, 2)
    original = ds.tokens.reshape(-1, 2)
    assert np.array_equal(np.sort(combined, axis=0), np.sort(original, axis=0))


def test_split_stratification_within_one_of_proportional():
    ds = sd.generate(sd.default_spec(), 337, seed=9)
    fraction = 0.6
    train, _ = sd.split(ds, fraction, seed=2)
    for c in range(ds.spec.n_classes):
        total = int((ds.class_labels == c).sum())
        got = int((train.class_labels == c).sum())
        assert abs(got - fraction * total) <= 1.0


def test_split_rejects_bad_fractions():
    ds = sd.generate(sd.default_spec(), 40, seed=0)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            sd.split(ds, bad, seed=0)


def test_disjointness_no_token_nearer_wrong_center():
    # 1e5+ tokens; truncation at 5 sigma plus >10 sigma spacing makes this exact
    spec = sd.MixtureSpec(n_modes=8, token_dim=2, seq_len=16, separation=6.0, sigma=1.0,
                          n_classes=4)
    ds = sd.generate(spec, 6500, seed=11)
    tokens = ds.pooled_tokens()
    assert len(tokens) >= 100_000
    dist = _dist_to_centers(tokens, ds.spec.centers)
    wrong = dist.argmin(axis=1) != ds.mode_ids.reshape(-1)
    assert wrong.mean() < 1e-6


def test_label_consistency_at_separation_ten():
    ds = sd.generate(sd.default_spec(), 6500, seed=13)
    dist = _dist_to_centers(ds.pooled_tokens(), ds.spec.centers)
    acc = (dist.argmin(axis=1) == ds.mode_ids.reshape(-1)).mean()
    assert acc >= 1.0 - 1e-6


def test_annulus_mode_shape_generates_within_truncation():
    spec = sd.MixtureSpec(n_modes=2, token_dim=2, seq_len=4, separation=8.0, sigma=1.0,
                          mode_shape="annulus")
    ds = sd.generate(spec, 200, seed=4)
    offsets = ds.tokens - ds.spec.centers[ds.mode_ids]
    radii = np.linalg.norm(offsets, axis=-1)
    assert radii.max() <= sd.TRUNCATE_SIGMA
    assert 1.0 < np.median(radii) < 3.0  # ring at ~2 sigma


def test_save_load_roundtrip_bitwise(tmp_path):
    ds = sd.generate(sd.default_spec(), 64, seed=21)
    path = tmp_path / "ds.dscn"
    sd.save(ds, path)
    back = sd.load(path)
    assert np.array_equal(back.tokens, ds.tokens)
    assert np.array_equal(back.mode_ids, ds.mode_ids)
    assert np.array_equal(back.class_labels, ds.class_labels)
    assert np.array_equal(back.spec.centers, ds.spec.centers)
    assert back.spec.class_to_modes == ds.spec.class_to_modes


def test_load_rejects_corrupted_checksum(tmp_path):
    ds = sd.generate(sd.default_spec(), 16, seed=2)
    path = tmp_path / "ds.dscn"
    sd.save(ds, path)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(sd.ChecksumError):
        sd.load(path)


def test_load_rejects_version_mismatch(tmp_path):
    ds = sd.generate(sd.default_spec(), 16, seed=2)
    path = tmp_path / "ds.dscn"
    sd.save(ds, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(sd.VersionMismatchError):
        sd.load(path)


def test_load_rejects_truncated_file(tmp_path):
    ds = sd.generate(sd.default_spec(), 16, seed=2)
    path = tmp_path / "ds.dscn"
    sd.save(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(sd.TruncatedFileError):
        sd.load(path)


def test_empty_dataset_roundtrips(tmp_path):
    ds = sd.generate(sd.default_spec(), 4, seed=2)
    empty = ds.subset(np.array([], dtype=np.int64))
    path = tmp_path / "empty.dscn"
    sd.save(empty, path)
    back = sd.load(path)
    assert len(back) == 0
    assert back.spec.n_modes == ds.spec.n_modes
