import numpy as np
import pytest

from hgrl.config import ConfigError
from hgrl.data import (ATTACK_GRIDS, KINDS, AttackSpec, GenParams, ManipSample, apply_attack,
                       attack_grid, augment, generate, hflip, jpeg_proxy, load_dataset, quantize,
                       resample_source, save_dataset, split_seeds)
from hgrl.metrics import evaluate


@pytest.mark.parametrize("kind", KINDS)
def test_generation_deterministic(kind):
    a, b = generate(kind, 11), generate(kind, 11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()


@pytest.mark.parametrize("kind", KINDS)
def test_mask_fraction_in_range(kind):
    fracs = [generate(kind, s).mask_fraction for s in range(40)]
    assert min(fracs) >= 0.02 and max(fracs) <= 0.25


@pytest.mark.parametrize("kind", KINDS)
def test_changes_confined_to_mask(kind):
    for seed in range(10):
        s = generate(kind, seed)
        changed = np.any(s.image != s.base, axis=0)
        assert not np.any(changed & (s.mask == 0))
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_copy_move_pastes_resampled_source():
    for seed in range(10):
        s = generate("copy-move", seed)
        dy, dx = s.info["shift"]
        ys, xs = np.nonzero(s.mask)
        expected = quantize(resample_source(s.base, ys, xs, dy, dx))
        np.testing.assert_array_equal(s.image[:, ys, xs], expected)
        # the offset is at least an eighth of the image and never lands on whole pixels
        for v in (dy, dx):
            assert abs(v) >= 8
            assert 0.3 <= abs(v) % 1 <= 0.7


def test_resample_source_on_a_ramp():
    # bilinear sampling reproduces an affine image exactly at fractional positions
    yy, xx = np.mgrid[0:16, 0:16].astype(np.float64)
    img = np.stack([0.01 * yy + 0.02 * xx, 0.5 - 0.01 * xx, 0.02 * yy])
    ys, xs = np.array([5, 9, 12]), np.array([4, 7, 10])
    out = resample_source(img, ys, xs, 2.4, -1.5)
    sy, sx = ys - 2.4, xs + 1.5
    np.testing.assert_allclose(out, np.stack([0.01 * sy + 0.02 * sx, 0.5 - 0.01 * sx, 0.02 * sy]),
                               atol=1e-12)


def test_splice_donor_noise_outside_authentic_band():
    p = GenParams()
    for seed in range(10):
        noise = generate("splice", seed).info["donor_noise"]
        assert noise < p.noise_range[0] or noise > p.noise_range[1]


def test_bad_size_and_kind():
    with pytest.raises(ConfigError):
        generate("splice", 0, size=40)
    with pytest.raises(ConfigError):
        generate("warp", 0)


def test_seed_ranges_disjoint():
    tr, te = split_seeds(3, 500, 100)
    assert not set(tr) & set(te)


def test_hflip_involution():
    s = generate("splice", 2)
    img, mask = hflip(*hflip(s.image, s.mask))
    np.testing.assert_array_equal(img, s.image)
    np.testing.assert_array_equal(mask, s.mask)


def test_augment_keeps_binary_mask_and_is_seeded():
    s = generate("removal", 4)
    for seed in range(30):
        a = augment(s, seed)
        assert set(np.unique(a.mask)) <= {0, 1}
        assert a.image.shape == s.image.shape
        b = augment(s, seed)
        assert a.image.tobytes() == b.image.tobytes()


def test_augment_keeps_alignment():
    # marker image: the mask itself painted into every channel
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[5:20, 30:50] = 1
    mask[40:44, 3:9] = 1
    marker = ManipSample(np.repeat(mask[None].astype(np.float32), 3, axis=0), mask, "splice", 0)
    for seed in range(40):
        a = augment(marker, seed, noise_max=0.0)
        np.testing.assert_array_equal(a.image[0] > 0.5, a.mask == 1)


# -- attacks ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def image():
    return generate("splice", 21).image


def test_null_attacks_are_identity(image):
    for kind, grid in ATTACK_GRIDS.items():
        np.testing.assert_array_equal(apply_attack(image, AttackSpec(kind, grid[0])), image)


def test_null_attack_keeps_f1(image):
    s = generate("splice", 21)
    pred = s.mask * 0.8 + 0.1
    clean = evaluate(pred, s.mask)
    for kind, grid in ATTACK_GRIDS.items():
        attacked = apply_attack(s.image, AttackSpec(kind, grid[0]))
        # a mask-free detector stand-in: threshold pixelwise on a fixed map
        assert abs(evaluate(pred * (attacked.mean() / s.image.mean()), s.mask).f1 - clean.f1) < 1e-6


def test_jpeg_quality_100_near_identity(image):
    # the lossless null point is skipped by apply_attack; the proxy itself stays within one level
    out = jpeg_proxy(image, 100)
    assert np.abs(out - image).max() <= 1.0 / 255 + 1e-7


def test_blur_of_constant_is_constant():
    flat = np.full((3, 32, 32), 0.4, dtype=np.float32)
    for k in (3, 5, 7):
        for kind in ("gaussian-blur", "mean-blur"):
            np.testing.assert_allclose(apply_attack(flat, AttackSpec(kind, k)), flat, atol=1e-7)


def test_jpeg_error_grows_with_compression():
    worse = 0
    for seed in range(20):
        img = np.random.default_rng(seed).random((3, 32, 32)).astype(np.float32)
        e50 = np.abs(jpeg_proxy(img, 50) - img).mean()
        e100 = np.abs(jpeg_proxy(img, 100) - img).mean()
        worse += e50 > e100
    assert worse == 20


def test_attacks_keep_size(image):
    for spec in attack_grid():
        out = apply_attack(image, spec, seed=1)
        assert out.shape == image.shape
        assert out.min() >= 0 and out.max() <= 1


def test_attack_spec_validation():
    with pytest.raises(ConfigError):
        AttackSpec("sharpen", 1)
    with pytest.raises(ConfigError):
        AttackSpec("jpeg", 55)


def test_noise_attack_is_seeded(image):
    spec = AttackSpec("noise", 0.02)
    np.testing.assert_array_equal(apply_attack(image, spec, 3), apply_attack(image, spec, 3))


# -- on-disk dataset ----------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    samples = [generate(k, i) for i, k in enumerate(KINDS)]
    save_dataset(samples, tmp_path)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "filename,kind,seed,mask_fraction"
    assert len(lines) == 4
    assert (tmp_path / "copy-move_0.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "copy-move_0_mask.pgm").read_bytes().startswith(b"P5")
    back = load_dataset(tmp_path)
    for a, b in zip(samples, back):
        np.testing.assert_allclose(a.image, b.image, atol=1e-6)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert (a.kind, a.seed) == (b.kind, b.seed)


def test_custom_area_bounds():
    p = GenParams(min_frac=0.1, max_frac=0.12)
    for seed in range(5):
        f = generate("splice", seed, params=p).mask_fraction
        assert 0.1 <= f <= 0.12
