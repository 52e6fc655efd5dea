import dataclasses
import math

import numpy as np
import pytest

from mmhomog.data import (
    EvalView,
    GenerationConfig,
    ImagePair,
    TrainPair,
    TrainView,
    UnmatchedFilesError,
    generate_corpus,
    generate_pair,
    load_corpus,
    modality_transform,
    save_corpus,
    save_image,
    split,
    synthetic_scene,
)
from mmhomog.errors import DataError
from mmhomog.geometry import CornerSet, Homography, ace_batch, apply_homography_points, mace
from mmhomog.warping import psnr, warp_image_np

# E||(U,V)||_2 for U, V ~ Uniform[-1, 1], by Monte Carlo with an independent generator
_MC = np.random.default_rng(20240101).uniform(-1, 1, size=(2_000_000, 2))
MEAN_NORM_MC = float(np.hypot(_MC[:, 0], _MC[:, 1]).mean())


def test_monte_carlo_oracle_against_closed_form():
    closed = (math.sqrt(2) + math.log(1 + math.sqrt(2))) / 3
    assert MEAN_NORM_MC == pytest.approx(closed, rel=2e-3)


def small_cfg(**kw):
    base = dict(source_size=48, patch_size=32, rho=6.0, count=8, seed=3)
    base.update(kw)
    return GenerationConfig(**base)


def test_generation_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(patch_size=32, rho=16)
    with pytest.raises(ValueError):
        GenerationConfig(moving_modality="sepia")


def test_rho_zero_gives_identical_images():
    cfg = small_cfg(rho=0.0)
    for p in generate_corpus(cfg):
        np.testing.assert_array_equal(p.moving, p.fixed)
        np.testing.assert_allclose(p.truth.m, np.eye(3), atol=1e-12)
        assert mace([Homography.identity()], [p.truth], CornerSet(32, 32)) == pytest.approx(0.0, abs=1e-9)


def test_truth_reprojects_drawn_offsets():
    cfg = small_cfg()
    src = synthetic_scene(48, np.random.default_rng(0))
    rng = np.random.default_rng(7)
    pair = generate_pair(src, cfg, rng)
    # replay the generator's draws to recover the offsets
    replay = np.random.default_rng(7)
    replay.integers(6, 48 - 32 - 6 + 1)
    replay.integers(6, 48 - 32 - 6 + 1)
    offsets = replay.uniform(-6, 6, size=(4, 2))
    corners = CornerSet(32, 32)
    np.testing.assert_allclose(apply_homography_points(pair.truth, corners.points), corners.points + offsets, atol=1e-6)
    assert mace([pair.truth], [pair.truth], corners) == 0.0


def test_generator_truth_aligns_images():
    cfg = GenerationConfig(source_size=96, patch_size=64, rho=8, count=6, seed=11)
    for p in generate_corpus(cfg):
        warped = warp_image_np(p.moving, p.truth)
        inner = (slice(None), slice(10, 54), slice(10, 54))
        assert psnr(warped[inner], p.fixed[inner]) > 25.0


def test_margin_violation():
    with pytest.raises(DataError):
        generate_pair(np.zeros((1, 40, 40)), small_cfg(), np.random.default_rng(0))


def test_generation_is_seeded_per_sample():
    a = generate_corpus(small_cfg(count=5))
    b = generate_corpus(small_cfg(count=3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.moving, y.moving)
        np.testing.assert_array_equal(x.truth.m, y.truth.m)
    c = generate_corpus(small_cfg(count=3, seed=4))
    assert not np.array_equal(a[0].moving, c[0].moving)


def test_identity_baseline_matches_monte_carlo():
    rho = 8.0
    cfg = GenerationConfig(source_size=80, patch_size=64, rho=rho, count=10_000, seed=5)
    view = EvalView.from_pairs(generate_corpus(cfg))
    base = ace_batch(view.truth, np.broadcast_to(np.eye(3), view.truth.shape), CornerSet(64, 64)).mean()
    assert base == pytest.approx(rho * MEAN_NORM_MC, rel=0.02)


def test_modality_examples():
    img = np.random.default_rng(0).random((1, 16, 16))
    np.testing.assert_array_equal(modality_transform(img, "identity"), img)
    np.testing.assert_allclose(modality_transform(img, "invert"), 1 - img)
    assert np.count_nonzero(modality_transform(np.full((1, 16, 16), 0.3), "edge_magnitude")) == 0
    gp = modality_transform(img, "gamma_posterize")
    assert set(np.unique(np.round(gp * 3, 9))) <= {0.0, 1.0, 2.0, 3.0}
    with pytest.raises(ValueError):
        modality_transform(img, "sepia")


@pytest.mark.parametrize("kind", ["identity", "invert", "edge_magnitude", "gamma_posterize"])
def test_modality_keeps_truth_and_range(kind):
    plain = generate_corpus(small_cfg(count=3))
    styled = generate_corpus(small_cfg(count=3, moving_modality=kind, fixed_modality=kind))
    for p, s in zip(plain, styled):
        np.testing.assert_array_equal(p.truth.m, s.truth.m)
        assert s.moving.min() >= 0 and s.moving.max() <= 1
        assert s.moving.shape == p.moving.shape


def test_round_trip_serialisation(tmp_path):
    cfg = GenerationConfig(source_size=48, patch_size=32, rho=6, count=100, seed=2,
                           moving_modality="invert", fixed_modality="edge_magnitude")
    pairs = generate_corpus(cfg)
    save_corpus(pairs, tmp_path, cfg)
    loaded = load_corpus(tmp_path, "generated_manifest")
    assert [p.identifier for p in loaded] == [p.identifier for p in pairs]
    for a, b in zip(pairs, loaded):
        assert np.array_equal(a.moving, b.moving) and a.moving.dtype == b.moving.dtype
        assert np.array_equal(a.fixed, b.fixed)
        assert np.array_equal(a.truth.m, b.truth.m)
    again = load_corpus(tmp_path, "paired_dirs")
    assert [p.identifier for p in again] == [p.identifier for p in pairs]


def test_empty_directory_warns(tmp_path):
    with pytest.warns(UserWarning):
        assert load_corpus(tmp_path, "paired_dirs") == []


def test_orphan_is_named(tmp_path):
    img = np.full((1, 8, 8), 0.5)
    for name in ("c", "a", "b"):
        for side in ("A", "B"):
            (tmp_path / side).mkdir(exist_ok=True)
            save_image(tmp_path / side / f"{name}.png", img)
    save_image(tmp_path / "A" / "zz.png", img)
    with pytest.raises(UnmatchedFilesError) as exc:
        load_corpus(tmp_path, "paired_dirs")
    assert exc.value.orphans == ["zz.png"]
    assert [p.identifier for p in exc.value.pairs] == ["a", "b", "c"]
    assert "zz.png" in str(exc.value)
    assert len(load_corpus(tmp_path, "paired_dirs", strict=False)) == 3


def test_malformed_truth_and_unreadable_image(tmp_path):
    img = np.full((1, 8, 8), 0.5)
    for side in ("A", "B"):
        (tmp_path / side).mkdir()
        save_image(tmp_path / side / "x.png", img)
    (tmp_path / "truth").mkdir()
    (tmp_path / "truth" / "x.txt").write_text("1 0 0 0 1")
    with pytest.raises(DataError):
        load_corpus(tmp_path, "paired_dirs")
    (tmp_path / "truth" / "x.txt").unlink()
    (tmp_path / "B" / "x.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_corpus(tmp_path, "paired_dirs")


def test_split_examples():
    pairs = generate_corpus(small_cfg(count=20))
    tv, ev = split(pairs, (1.0, 0.0), 0)
    assert len(tv) == 20 and len(ev) == 0
    a_tr, a_ev = split(pairs, (0.7, 0.3), 9)
    b_tr, b_ev = split(pairs, (0.7, 0.3), 9)
    assert a_tr.identifiers == b_tr.identifiers and a_ev.identifiers == b_ev.identifiers
    assert set(a_tr.identifiers).isdisjoint(a_ev.identifiers)
    assert len(a_tr) + len(a_ev) == 20
    with pytest.raises(ValueError):
        split(pairs, (0.5, 0.4), 0)
    with pytest.raises(ValueError):
        split(pairs, (1.2, -0.2), 0)


def test_split_counts_honoured():
    stub = [ImagePair(np.zeros((1, 8, 8), np.float32), np.zeros((1, 8, 8), np.float32), None, f"{i:05d}") for i in range(10_000)]
    tv, ev = split(stub, (0.9, 0.1), 0)
    assert (len(tv), len(ev)) == (9000, 1000)


def test_train_view_is_truth_free():
    names = {f.name for f in dataclasses.fields(TrainView)}
    assert "truth" not in names
    assert "truth" not in {f.name for f in dataclasses.fields(TrainPair)}
    tv, _ = split(generate_corpus(small_cfg(count=4)), (1.0, 0.0), 0)
    assert not hasattr(tv, "truth") and not hasattr(tv[0], "truth")


def test_batch_order_is_pure_function_of_seed():
    tv = TrainView.from_pairs(generate_corpus(small_cfg(count=10)))
    a = [b.tolist() for b in tv.batches(4, 3, 0)]
    assert a == [b.tolist() for b in tv.batches(4, 3, 0)]
    assert a != [b.tolist() for b in tv.batches(4, 3, 1)]
    assert sorted(sum(a, [])) == list(range(10))
