import numpy as np
import pytest

from foelearn.bilevel import init_filterbank
from foelearn.cli import synthetic_image
from foelearn.energy import DownsampleBlur, FilterBank, FoEModel
from foelearn.errors import DimensionError, ParameterError
from foelearn.imagecore import add_gaussian_noise, psnr
from foelearn.penalty import Penalty
from foelearn.restore import (RestoreTask, default_lambda, denoise_multiplier, motion_kernel,
                              restore)


def model(alpha=1.0, norm=0.05, kind="logsq"):
    fb = init_filterbank(3, 8, "dct", norm=norm)
    return FoEModel(FilterBank(fb.basis, fb.beta, np.full(8, float(alpha))), Penalty(kind))


def test_default_lambda_anchor_values():
    assert default_lambda(RestoreTask("denoise", sigma=15)) == pytest.approx(25 / 15 * 1.15)
    assert default_lambda(RestoreTask("denoise", sigma=15)) == pytest.approx(1.9167, abs=1e-4)
    assert default_lambda(RestoreTask("denoise", sigma=50)) == pytest.approx(0.4)
    assert default_lambda(RestoreTask("denoise", sigma=25)) == 1.0
    assert default_lambda(RestoreTask("inpaint", mask=np.ones((4, 4)))) == 1000.0


def test_denoise_multiplier_piecewise_linear():
    assert denoise_multiplier(5) == 1.15 and denoise_multiplier(20) == 1.15
    assert denoise_multiplier(40) == 0.8 and denoise_multiplier(80) == 0.8
    assert denoise_multiplier(22.5) == pytest.approx(1.075)
    assert denoise_multiplier(32.5) == pytest.approx(0.9)
    s = np.linspace(10, 60, 101)
    assert np.all(np.diff([denoise_multiplier(x) for x in s]) <= 0)


def test_default_lambda_other_tasks_and_override():
    k = motion_kernel(5)
    assert default_lambda(RestoreTask("deblur", sigma=2.5, kernel=k)) == 10.0
    assert default_lambda(RestoreTask("superres", sigma=8, factor=3)) == pytest.approx(25 / 8)
    assert default_lambda(RestoreTask("denoise", sigma=25, lam=3.5)) == 3.5


def test_zero_sigma_needs_override():
    with pytest.raises(ParameterError):
        default_lambda(RestoreTask("denoise", sigma=0))
    with pytest.raises(ParameterError):
        default_lambda(RestoreTask("deblur", kernel=motion_kernel(3)))
    assert default_lambda(RestoreTask("denoise", sigma=0, lam=50.0)) == 50.0


def test_task_validation():
    with pytest.raises(ParameterError):
        RestoreTask("sharpen", sigma=1)
    with pytest.raises(ParameterError):
        RestoreTask("denoise", sigma=-1)
    with pytest.raises(ParameterError):
        RestoreTask("inpaint")
    with pytest.raises(ParameterError):
        RestoreTask("inpaint", mask=np.full((3, 3), 0.5))
    with pytest.raises(ParameterError):
        RestoreTask("deblur", sigma=1)
    with pytest.raises(ParameterError):
        RestoreTask("superres", sigma=1)
    with pytest.raises(ParameterError):
        RestoreTask("denoise", sigma=25, lam=-1.0)


def test_motion_kernel():
    k = motion_kernel(9)
    assert k.shape == (9, 9) and k.sum() == pytest.approx(1.0)
    assert np.allclose(k[4], 1 / 9) and np.all(np.delete(k, 4, axis=0) == 0)
    v = motion_kernel(9, 90)
    assert np.allclose(v, k.T, atol=1e-15)
    d = motion_kernel(7, 45)
    assert d.shape == (7, 7) and np.allclose(d, d.T) and d.sum() == pytest.approx(1.0)
    assert motion_kernel(4).shape == (5, 5)
    with pytest.raises(ParameterError):
        motion_kernel(0)


def test_denoise_with_zero_weights_returns_input():
    f = add_gaussian_noise(synthetic_image(24), 25, 0)
    r = restore(model(alpha=0.0), RestoreTask("denoise", sigma=25), f)
    assert r.converged and np.array_equal(r.u, f)


def test_inpaint_full_mask_is_pass_through():
    f = add_gaussian_noise(synthetic_image(24), 25, 0)
    r = restore(model(), RestoreTask("inpaint", mask=np.ones(f.shape)), f)
    assert r.converged and r.lam == 1000.0
    assert np.max(np.abs(r.u - f)) <= 0.5


def test_inpaint_keeps_observed_pixels():
    g = synthetic_image(32)
    mask = (np.random.default_rng(2).random(g.shape) > 0.7).astype(float)
    f = g * mask
    r = restore(model(alpha=5.0, norm=0.1), RestoreTask("inpaint", mask=mask), f)
    assert r.converged
    assert np.max(np.abs(r.u - f)[mask == 1]) <= 0.5
    warm = RestoreTask("inpaint", mask=mask).operator.warm_start(f)
    assert psnr(r.u, g) > psnr(warm, g)


def test_denoise_improves_and_is_deterministic():
    g = synthetic_image(32)
    f = add_gaussian_noise(g, 25, 1)
    task = RestoreTask("denoise", sigma=25)
    m = model(alpha=10.0, norm=0.05)
    a = restore(m, task, f)
    b = restore(m, task, f)
    assert np.array_equal(a.u, b.u)
    assert psnr(a.u, g) > psnr(f, g)
    d = a.as_dict()
    assert d["lambda"] == 1.0 and d["converged"] is True


def test_superres_lowers_energy_from_warm_start():
    g = synthetic_image(36)
    K = DownsampleBlur(3)
    f = add_gaussian_noise(K.apply(g), 8, 3)
    r = restore(model(alpha=5.0, norm=0.1), RestoreTask("superres", sigma=8, factor=3), f)
    assert r.converged and r.u.shape == g.shape
    # nearest upsampling reproduces the observation exactly, so the prior
    # term is what the solver reduces
    assert np.max(np.abs(K.apply(K.warm_start(f)) - f)) <= 1e-9
    tr = r.diagnostics.energy_trace
    assert tr[-1] < tr[0]


def test_deblur_output_shape_and_dimension_check():
    g = synthetic_image(24)
    k = motion_kernel(5, 30)
    task = RestoreTask("deblur", sigma=2.5, kernel=k)
    f = add_gaussian_noise(task.operator.apply(g), 2.5, 4)
    r = restore(model(alpha=5.0, norm=0.1), task, f, maxiter=20000)
    assert r.u.shape == g.shape
    with pytest.raises(DimensionError):
        restore(model(), RestoreTask("inpaint", mask=np.ones((10, 10))), np.zeros((10, 12)))


def test_nonconvergence_is_flagged_not_raised():
    f = add_gaussian_noise(synthetic_image(24), 25, 0)
    r = restore(model(alpha=10.0, norm=1.0), RestoreTask("denoise", sigma=25), f,
                gtol=1e-12, maxiter=2)
    assert not r.converged and r.u.shape == f.shape
