import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zerolag.blocks import count_flops
from zerolag.metrics import MsSsimParams, crossover_k, flops_report, ms_ssim, psnr, strategy_cost
from zerolag.model import ModelConfig, model_flops
from zerolag.predict import ModelSet
from zerolag.tensor import ShapeError

C1 = 0.01 ** 2

try:
    from skimage.metrics import structural_similarity
except ImportError:  # optional oracle
    structural_similarity = None


def _img(seed, shape=(3, 64, 64)):
    return np.random.default_rng(seed).uniform(0, 1, shape)


def test_identity_is_one():
    x = _img(0)
    assert ms_ssim(x, x) == 1.0
    assert ms_ssim(x[:, :, :40], x[:, :, :40]) == 1.0


@pytest.mark.parametrize("shape", [(3, 64, 64), (1, 176, 176), (3, 32, 48)])
def test_constant_images_closed_form(shape):
    a, b = np.zeros(shape), np.ones(shape)
    assert abs(ms_ssim(a, b) - C1 / (1 + C1)) < 1e-9


@given(st.integers(0, 2**31))
def test_symmetry(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0, 1, (3, 48, 48))
    b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
    assert abs(ms_ssim(a, b) - ms_ssim(b, a)) < 1e-9


def test_noise_monotonicity():
    base = np.random.default_rng(3).uniform(0.2, 0.8, (3, 64, 64))
    noise = np.random.default_rng(4).standard_normal(base.shape)
    scores = [ms_ssim(base, np.clip(base + s * noise, 0, 1)) for s in (0.0, 0.01, 0.05, 0.1)]
    assert scores[0] == 1.0
    assert all(x > y for x, y in zip(scores, scores[1:]))


def test_shift_invariance_of_interior_crops():
    r = np.random.default_rng(5)
    a = r.uniform(0, 1, (3, 80, 80))
    b = np.clip(a + r.normal(0, 0.05, a.shape), 0, 1)
    s0 = ms_ssim(a[:, 8:72, 8:72], b[:, 8:72, 8:72])
    s1 = ms_ssim(np.roll(a, (3, 5), (1, 2))[:, 11:75, 13:77], np.roll(b, (3, 5), (1, 2))[:, 11:75, 13:77])
    assert abs(s0 - s1) < 1e-6


@pytest.mark.skipif(structural_similarity is None, reason="scikit-image oracle not installed")
def test_single_scale_matches_skimage_ssim():
    r = np.random.default_rng(6)
    a = r.uniform(0, 1, (40, 40))
    b = np.clip(a + r.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    ours = ms_ssim(a[None], b[None], MsSsimParams(scales=1, weights=(1.0,)))
    assert abs(ours - ref) < 1e-6


def _independent_ramp_value():
    """MS-SSIM of the ramp pair evaluated with scipy's Gaussian filter as the oracle."""
    ndimage = pytest.importorskip("scipy.ndimage")
    x = np.linspace(0, 1, 64 * 64).reshape(64, 64)
    y = x ** 2
    weights = np.array([0.0448, 0.2856, 0.3001])
    weights = weights / weights.sum()
    total = 1.0
    for s in range(3):
        def filt(z):
            full = ndimage.gaussian_filter(z, 1.5, truncate=3.5, mode="constant")
            return full[5:-5, 5:-5]
        mx, my = filt(x), filt(y)
        sxx, syy, sxy = filt(x * x) - mx ** 2, filt(y * y) - my ** 2, filt(x * y) - mx * my
        lum = (2 * mx * my + C1) / (mx ** 2 + my ** 2 + C1)
        cs = (2 * sxy + 0.03 ** 2) / (sxx + syy + 0.03 ** 2)
        total *= max((lum * cs).mean(), 0) ** weights[s]
        x = 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])
        y = 0.25 * (y[0::2, 0::2] + y[1::2, 0::2] + y[0::2, 1::2] + y[1::2, 1::2])
    return total


def test_matches_scipy_oracle():
    x = np.linspace(0, 1, 64 * 64).reshape(1, 64, 64)
    assert ms_ssim(x, x ** 2) == pytest.approx(_independent_ramp_value(), abs=1e-9)


def test_scale_reduction():
    p = MsSsimParams()
    assert p.for_size(64, 64)[0] == 3
    assert p.for_size(176, 176)[0] == 5
    scales, w = p.for_size(44, 100)
    assert scales == 3 and abs(w.sum() - 1) < 1e-12
    with pytest.raises(ShapeError, match="too small"):
        MsSsimParams(auto_reduce=False).for_size(64, 64)
    with pytest.raises(ShapeError, match="window"):
        p.for_size(8, 8)


def test_coarsest_luminance_variant():
    a = _img(7, (1, 176, 176))
    b = np.clip(a + 0.05, 0, 1)
    classic = ms_ssim(a, b, MsSsimParams(luminance="coarsest"))
    allscale = ms_ssim(a, b)
    assert 0 < allscale <= classic <= 1


def test_param_validation():
    with pytest.raises(ValueError):
        MsSsimParams(scales=0)
    with pytest.raises(ValueError, match="sum to 1"):
        MsSsimParams(weights=(0.5, 0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        MsSsimParams(luminance="some")
    with pytest.raises(ShapeError):
        ms_ssim(np.zeros((3, 64, 64)), np.zeros((3, 64, 32)))


def test_psnr_examples():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    r = np.random.default_rng(0).standard_normal((3, 8, 8))
    r *= 0.1 / np.sqrt((r ** 2).mean())
    assert psnr(a, r) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeError):
        psnr(a, a[:2])


# --- cost reports --------------------------------------------------------------------

def test_flops_report_linearity():
    cfg = ModelConfig(channels=(6, 12, 18))
    rec = flops_report(cfg, (64, 64), "recurrent")
    arb = flops_report(ModelConfig(channels=(6, 12, 18), embed_timestep=True), (64, 64), "arbitrary")
    assert rec.per_k[4] == 4 * rec.per_k[1]
    assert all(rec.per_k[k] == k * rec.per_k[1] for k in range(1, 6))
    assert arb.per_k[1] == arb.per_k[5]
    assert rec.per_inference == model_flops(cfg, 64, 64)
    d = rec.to_dict()
    assert d["per_k"][0]["flops"] == str(rec.per_k[1])
    assert Fraction(d["per_inference_flops"]) == rec.per_inference


def test_flops_report_consistent_with_block_counts():
    cfg = ModelConfig.fast(channels=(12, 18, 24))
    total = model_flops(cfg, 32, 32)
    blocks = sum(count_flops(cfg.block_graph(l), cfg.channels[l], 32 >> l, 32 >> l) for l in range(3))
    convs = Fraction(0)
    h = w = 32
    for l in range(3):
        spec = cfg.encoder_spec(l)
        h, w = spec.out_size(h, w)
        convs += 2 * spec.flops(h, w)
        convs += cfg.entry_spec(l).flops(32 >> l, 32 >> l) + cfg.head_spec(l).flops(32 >> l, 32 >> l)
    assert total == blocks + convs


def test_independent_report_uses_one_model():
    from zerolag.model import init_model
    cfg = ModelConfig(levels=2, channels=(6, 12))
    ms = ModelSet([init_model(cfg, 0), init_model(cfg, 1)])
    rep = flops_report(ms, (16, 16), "independent", range(1, 3))
    assert rep.per_k[1] == rep.per_k[2] == model_flops(cfg, 16, 16)


def test_crossover_with_published_totals():
    a, b = Fraction("12.71"), Fraction("57.71")
    assert crossover_k(a, b) == 5
    for k in range(1, 10):
        assert (strategy_cost(b, "arbitrary", k) < strategy_cost(a, "recurrent", k)) == (k > b / a)


@given(st.integers(1, 1000), st.integers(1, 1000), st.integers(1, 50))
def test_crossover_property(a, b, k):
    a, b = Fraction(a), Fraction(a + b)  # b > a
    single_cheaper = strategy_cost(b, "independent", k) < strategy_cost(a, "recurrent", k)
    assert single_cheaper == (k > b / a)
    assert single_cheaper == (k >= crossover_k(a, b))


def test_strategy_cost_rejects_unknown():
    with pytest.raises(ValueError):
        strategy_cost(1, "teleport", 1)
