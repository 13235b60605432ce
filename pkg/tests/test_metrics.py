import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cglo.data import generate_phantom
from cglo.errors import InvalidArgument
from cglo.metrics import psnr, ssim, summarize


def test_psnr_examples(rng):
    ref = rng.random((16, 16))
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0)
    assert psnr(ref, ref) == math.inf
    assert psnr(ref + 0.2, ref, data_range=2.0) == pytest.approx(20.0)
    with pytest.raises(InvalidArgument):
        psnr(ref, ref[:4])
    with pytest.raises(InvalidArgument):
        psnr(ref, ref, data_range=0)


def test_psnr_decreases_with_noise(rng):
    ref = generate_phantom(1, 32)
    n = rng.standard_normal(ref.shape)
    vals = [psnr(ref + s * n, ref) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_and_inversion():
    ref = generate_phantom(4, 32)
    assert ssim(ref, ref) == pytest.approx(1.0)
    assert ssim(1.0 - ref, ref) < 1.0


def test_ssim_window_guard():
    with pytest.raises(InvalidArgument):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_agrees_with_skimage():
    skm = pytest.importorskip("skimage.metrics")
    r = np.random.default_rng(3)
    for k in range(10):
        ref = generate_phantom(k, 32)
        x = np.clip(ref + 0.1 * r.standard_normal(ref.shape), 0, 1)
        other = skm.structural_similarity(x, ref, data_range=1.0, gaussian_weights=True,
                                          sigma=1.5, use_sample_covariance=False)
        assert abs(ssim(x, ref) - other) < 1e-3


@given(st.integers(0, 2**31 - 1))
def test_ssim_symmetric(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((2, 16, 16))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-10
    assert -1.0 <= ssim(a, b) <= 1.0


def test_summarize_examples():
    s = summarize([1, 2, 3, 4, 5])
    assert (s.median, s.half_iqr, s.n) == (3.0, 1.0, 5)
    s = summarize([7.5])
    assert (s.median, s.half_iqr) == (7.5, 0.0)
    assert summarize([1, 2, 3, 4]).median == 2.5
    with pytest.raises(InvalidArgument):
        summarize([])


def test_summary_format():
    s = summarize([29.0, 30.3, 31.6, 32.9, 34.0])
    assert s.format() == "31.60 ± 1.30"
    assert s.to_dict() == {"median": 31.6, "half_iqr": pytest.approx(1.3), "n": 5}


def test_summarize_drops_infinite_with_warning():
    with pytest.warns(RuntimeWarning):
        s = summarize([1.0, math.inf, 3.0])
    assert s.n == 2 and s.per_item == [1.0, 3.0]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.randoms())
def test_summarize_permutation_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    a, b = summarize(values), summarize(shuffled)
    assert a.median == b.median and a.half_iqr == b.half_iqr and a.half_iqr >= 0
