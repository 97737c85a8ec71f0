import numpy as np
import pytest

from prospect_lab.diffusion import TrajectoryRecord
from prospect_lab.spectral import (ZeroEnergyError, dft2, hf_ratio, image_hf_ratio,
                                   log_magnitude_image, naive_dft2, spearman, trajectory_hf_curve,
                                   trajectory_rows)
from prospect_lab.synth import AttributeLabel, render_label


def rand_img(seed, shape=(32, 32)):
    return np.random.default_rng(seed).uniform(-1, 1, shape).astype(np.float32)


def test_constant_image_is_dc_only():
    F = dft2(np.full((32, 32), 0.3, np.float32)).F
    assert F[0, 0] == pytest.approx(np.float32(0.3) * 1024, abs=1e-6)
    F[0, 0] = 0
    assert np.abs(F).max() < 1e-6


def test_impulse_has_flat_spectrum():
    img = np.zeros((32, 32))
    img[0, 0] = 1
    np.testing.assert_allclose(np.abs(dft2(img).F), 1.0, atol=1e-12)


def test_matches_naive_double_sum_small():
    img = rand_img(1, (6, 5))
    F = dft2(img).F
    assert F.shape == (5, 6)  # (M = width, N = height)
    np.testing.assert_allclose(F, naive_dft2(img), rtol=1e-9, atol=1e-9)


def test_u_is_horizontal_frequency():
    x = np.arange(32)
    vstripe = np.tile(np.cos(2 * np.pi * 8 * x / 32), (32, 1))  # varies along columns
    E = dft2(vstripe).energy()
    assert E[8, 0] > 1e3 and E[0, 8] < 1e-6


def test_parseval_and_conjugate_symmetry():
    for seed in range(5):
        img = rand_img(seed).astype(np.float64)
        F = dft2(img).F
        assert np.sum(img ** 2) == pytest.approx(np.sum(np.abs(F) ** 2) / img.size, rel=1e-6)
        M, N = F.shape
        mirrored = F[(-np.arange(M)) % M][:, (-np.arange(N)) % N]
        np.testing.assert_allclose(F, np.conj(mirrored), atol=1e-9)


def test_hf_ratio_examples():
    with pytest.raises(ZeroEnergyError, match="zero energy"):
        image_hf_ratio(np.full((32, 32), 0.5))
    x = np.arange(32)
    stripe = np.tile(np.where((x // 2) % 2 == 0, 0.8, 0.4), (32, 1))
    assert image_hf_ratio(stripe) == pytest.approx(1.0)
    yy, xx = np.mgrid[0:32, 0:32]
    blob = np.exp(-((xx - 15.5) ** 2 + (yy - 15.5) ** 2) / (2 * 6.0 ** 2))
    assert image_hf_ratio(blob) < 0.1


def test_hf_ratio_ignores_brightness_and_centering():
    img = rand_img(3)
    r = image_hf_ratio(img)
    assert image_hf_ratio(img + 0.25) == pytest.approx(r, rel=1e-9)
    assert hf_ratio(dft2(img).center()) == pytest.approx(r, rel=1e-12)
    assert 0 <= r <= 1


def test_trajectory_curve_skips_zero_energy():
    tex = render_label(AttributeLabel("TL", "square", "checker"))
    flat = np.full((32, 32), -0.8, np.float32)
    rec = TrajectoryRecord([(1000, tex), (500, flat), (20, tex)])
    rows = trajectory_rows(rec)
    assert [r[2] is None for r in rows] == [False, True, False]
    curve = trajectory_hf_curve(rec)
    assert [k for k, _ in curve] == [0, 2]
    assert curve[0][1] == curve[1][1]
    with pytest.raises(ValueError):
        trajectory_hf_curve(TrajectoryRecord([]))


def test_spearman_examples():
    assert spearman([1, 2, 3, 4], [1, 5, 7, 9]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [9, 7, 5, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 4], [10, 30, 20, 40]) == pytest.approx(0.8)
    # ties use average ranks: ys ranks [1.5, 1.5, 3, 4]
    assert spearman([1, 2, 3, 4], [5, 5, 6, 7]) == pytest.approx(0.9486832980505138)
    with pytest.raises(ValueError):
        spearman([1], [2])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


def test_log_magnitude_image_range():
    im = log_magnitude_image(rand_img(2))
    assert im.shape == (32, 32) and im.min() == -1 and im.max() == pytest.approx(1)
