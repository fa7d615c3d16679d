import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import foreground_hue, hue_distance, toy_config
from diffinject.bias_bench import DatasetSpec, generate_dataset
from diffinject.diffusion import DenoiserConfig, UNet, default_schedule, from_model_range, to_model_range
from diffinject.errors import CalibrationError, ConfigError, DomainError
from diffinject.injector import (
    InjectionConfig, compute_t_edit, ddim_invert, ddim_reconstruct, distance_curve, first_crossing, inject_h,
    patch_stats_distance, reverse_with_injection, slerp, timestep_sequence,
)
from diffinject.pipeline import foreground_mask


# --- Slerp ----------------------------------------------------------------

def test_slerp_orthogonal_midpoint():
    out = slerp(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
    assert np.allclose(out, [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-15)


def test_slerp_endpoints_are_exact():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert np.array_equal(slerp(a, b, 0.0), a)
    assert np.array_equal(slerp(a, b, 1.0), b)


def test_slerp_parallel_falls_back_to_lerp():
    a = np.array([1.0, 2.0, 3.0])
    out = slerp(a, 2 * a, 0.25)
    assert np.allclose(out, 0.75 * a + 0.25 * 2 * a, atol=1e-12)
    assert np.isfinite(out).all()


def test_slerp_errors():
    with pytest.raises(DomainError):
        slerp(np.ones(3), np.ones(3), 1.5)
    with pytest.raises(DomainError):
        slerp(np.ones(3), np.ones(4), 0.5)
    with pytest.raises(DomainError):
        slerp(np.zeros(3), np.ones(3), 0.5)


vec = arrays(np.float64, 6, elements=st.floats(-3, 3))


@settings(max_examples=60, deadline=None)
@given(a=vec, b=vec, gamma=st.floats(0, 1))
def test_slerp_geometry(a, b, gamma):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-3 or nb < 1e-3:
        return
    b = b / nb * na  # equal norms
    cos = np.clip(a @ b / na**2, -1, 1)
    omega = np.arccos(cos)
    if omega > np.pi - 1e-3 or omega < 1e-3:
        return
    out = slerp(a, b, gamma)
    assert np.linalg.norm(out) == pytest.approx(na, rel=1e-9)
    got = np.arccos(np.clip(out @ a / (np.linalg.norm(out) * na), -1, 1))
    assert got == pytest.approx(gamma * omega, abs=1e-6)


def test_slerp_torch_matches_numpy():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    t = slerp(torch.as_tensor(a), torch.as_tensor(b), 0.3)
    assert isinstance(t, torch.Tensor)
    assert np.allclose(t.numpy(), slerp(a, b, 0.3), atol=0)


# --- h injection --------------------------------------------------------

def test_inject_without_mask_preserves_norm_and_hits_content_at_one():
    rng = np.random.default_rng(2)
    ho, hc = rng.normal(size=(2, 4, 3, 3)), 5 * rng.normal(size=(2, 4, 3, 3))
    mixed = inject_h(ho, hc, 0.6)
    for i in range(2):
        assert np.linalg.norm(mixed[i]) == pytest.approx(np.linalg.norm(ho[i]), rel=1e-9)
    full = inject_h(ho, hc, 1.0)
    for i in range(2):
        assert np.allclose(full[i], hc[i] / np.linalg.norm(hc[i]) * np.linalg.norm(ho[i]), atol=1e-12)
    assert np.array_equal(inject_h(ho, hc, 0.0), ho)


def test_inject_mask_leaves_outside_untouched():
    rng = np.random.default_rng(3)
    ho, hc = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    mask = np.zeros((3, 3), bool)
    mask[1:, 1:] = True
    out = inject_h(ho, hc, 0.8, mask)
    assert np.array_equal(out[:, ~mask], ho[:, ~mask])
    assert not np.allclose(out[:, mask], ho[:, mask])
    assert np.linalg.norm(out[:, mask]) == pytest.approx(np.linalg.norm(ho[:, mask]), rel=1e-9)
    assert np.array_equal(inject_h(ho, hc, 0.8, np.zeros((3, 3), bool)), ho)


def test_inject_errors():
    with pytest.raises(DomainError):
        inject_h(np.ones((2, 3, 3)), np.ones((2, 4, 4)), 0.5)
    with pytest.raises(DomainError):
        inject_h(np.ones((2, 3, 3)), np.ones((2, 3, 3)), 0.5, np.ones((2, 2), bool))


# --- config and timesteps -----------------------------------------------

def test_resolved_defaults():
    cfg = InjectionConfig().resolved(default_schedule(100))
    assert (cfg.t_edit, cfg.t_boost, cfg.num_steps) == (100, 20, 100)
    assert InjectionConfig(t_edit=7).resolved(default_schedule(100)).t_boost == 7


@pytest.mark.parametrize("kw", [dict(gamma_inject=1.2), dict(t_edit=10, t_boost=30), dict(t_edit=101),
                                dict(eta_boost=-0.1), dict(num_steps=0)])
def test_invalid_injection_configs(kw):
    with pytest.raises(ConfigError):
        InjectionConfig(**kw).resolved(default_schedule(100))


def test_timestep_sequence():
    assert list(timestep_sequence(5)) == [1, 2, 3, 4, 5]
    assert list(timestep_sequence(100, 50)) == list(range(2, 101, 2))
    assert timestep_sequence(100, 1).tolist() == [100]


# --- DDIM against the zero-noise stub (closed forms in float64) ---------

@pytest.fixture
def x0():
    return torch.as_tensor(np.random.default_rng(4).uniform(-1, 1, (2, 3, 8, 8)))


def test_zero_stub_inversion_closed_form(zero_denoiser, x0):
    s = default_schedule(100)
    traj = ddim_invert(x0, zero_denoiser, s, num_steps=50)
    assert torch.allclose(traj.x_T, np.sqrt(s.alpha_bar(100)) * x0, rtol=0, atol=1e-12)
    # h_t is read from the latent the step starts at, x_s = sqrt(a_s) x0
    prev = [0] + list(traj.timesteps[:-1])
    for t, s_prev in zip(traj.timesteps, prev):
        want = F.adaptive_avg_pool2d(np.sqrt(s.alpha_bar(s_prev)) * x0, 4)
        assert torch.allclose(traj.h_at(int(t)), want, atol=1e-12)
    with pytest.raises(DomainError):
        traj.h_at(3)


def test_zero_stub_round_trip_is_exact(zero_denoiser, x0):
    s = default_schedule(100)
    traj = ddim_invert(x0, zero_denoiser, s)
    assert torch.allclose(ddim_reconstruct(traj.x_T, zero_denoiser, s), x0, atol=1e-12)
    cfg = InjectionConfig(gamma_inject=0.9, eta_boost=0.0)
    out = reverse_with_injection(traj.x_T, traj, zero_denoiser, s, cfg, return_latent=True)
    assert torch.allclose(out, x0, atol=1e-12)


def test_zero_stub_boost_noise_closed_form(zero_denoiser, x0):
    s = default_schedule(100)
    traj = ddim_invert(x0, zero_denoiser, s, num_steps=50)
    cfg = InjectionConfig(eta_boost=1.0, t_boost=20, num_steps=50)
    out = reverse_with_injection(traj.x_T, traj, zero_denoiser, s, cfg, torch.Generator().manual_seed(7),
                                 return_latent=True)
    # eps == 0, so each step is x <- sqrt(a_p / a_t) x + sigma z
    g = torch.Generator().manual_seed(7)
    x = traj.x_T.clone()
    seq = traj.timesteps
    for i in range(len(seq) - 1, -1, -1):
        t, tp = int(seq[i]), int(seq[i - 1]) if i else 0
        a_t, a_p = s.alpha_bar(t), s.alpha_bar(tp)
        x = np.sqrt(a_p / a_t) * x
        if t <= 20:
            sigma = np.sqrt((1 - a_p) / (1 - a_t)) * np.sqrt(1 - a_t / a_p)
            x = x + sigma * torch.randn(x.shape, generator=g, dtype=x.dtype)
    assert torch.allclose(out, x, atol=1e-12)
    assert not torch.allclose(out, x0, atol=1e-3)


class LinearH:
    """eps = 0.5 * upsample(h) + 0.1 * x with h = 4x4 average pool of x."""

    bottleneck_shape = (3, 4, 4)

    def encode(self, x, t):
        return F.adaptive_avg_pool2d(x, 4), None, x

    def decode(self, h, skips, x):
        return 0.5 * F.interpolate(h, size=x.shape[-2:], mode="nearest") + 0.1 * x

    def __call__(self, x, t, h_override=None, return_h=False):
        h, skips, temb = self.encode(x, t)
        out = self.decode(h if h_override is None else h_override, skips, temb)
        return (out, h) if return_h else out


def test_asymmetric_reverse_matches_reference():
    s = default_schedule(100)
    den = LinearH()
    rng = np.random.default_rng(5)
    orig = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    content = torch.as_tensor(rng.uniform(-1, 1, (2, 3, 8, 8)))
    traj_o = ddim_invert(orig, den, s, num_steps=10)
    traj_c = ddim_invert(content, den, s, num_steps=10)
    cfg = InjectionConfig(gamma_inject=0.7, t_edit=60, t_boost=0, eta_boost=0.0, num_steps=10)
    out = reverse_with_injection(traj_o.x_T, traj_c, den, s, cfg, content_index=[1, 0], return_latent=True)

    x = traj_o.x_T.clone()
    seq = traj_o.timesteps
    for i in range(len(seq) - 1, -1, -1):
        t, tp = int(seq[i]), int(seq[i - 1]) if i else 0
        a_t, a_p = s.alpha_bar(t), s.alpha_bar(tp)
        h = F.adaptive_avg_pool2d(x, 4)
        eps = den.decode(h, None, x)
        eps_tilde = eps
        if t >= 60:
            hc = traj_c.hs[i][[1, 0]]
            mixed = torch.stack([torch.as_tensor(slerp(h[j].flatten().numpy(),
                                 (hc[j] / hc[j].norm() * h[j].norm()).flatten().numpy(), 0.7)).view(3, 4, 4)
                                 for j in range(2)])
            eps_tilde = den.decode(mixed, None, x)
        p_t = (x - np.sqrt(1 - a_t) * eps_tilde) / np.sqrt(a_t)
        x = np.sqrt(a_p) * p_t + np.sqrt(1 - a_p) * eps
    assert torch.allclose(out, x, atol=1e-10)


@pytest.fixture(scope="module")
def tiny_unet():
    torch.manual_seed(0)
    return UNet(DenoiserConfig(image_size=16, base_width=16)).eval()


def test_zero_gamma_equals_plain_ddim_on_unet(tiny_unet):
    s = default_schedule(100)
    x0 = torch.rand(2, 3, 16, 16) * 2 - 1
    traj = ddim_invert(x0, tiny_unet, s, num_steps=20)
    plain = ddim_reconstruct(traj.x_T, tiny_unet, s, num_steps=20)
    cfg = InjectionConfig(gamma_inject=0.0, eta_boost=0.0, num_steps=20)
    injected = reverse_with_injection(traj.x_T, traj, tiny_unet, s, cfg, return_latent=True)
    assert torch.equal(plain, injected)
    assert from_model_range(injected).shape == (2, 16, 16, 3)


def test_step_count_mismatch_rejected(zero_denoiser, x0):
    s = default_schedule(100)
    traj = ddim_invert(x0, zero_denoiser, s, num_steps=10)
    with pytest.raises(ConfigError):
        reverse_with_injection(traj.x_T, traj, zero_denoiser, s, InjectionConfig(num_steps=20))


# --- t_edit calibration -------------------------------------------------

def test_first_crossing_examples():
    assert first_crossing([1, 2, 3, 4], [0.1, 0.2, 0.33, 0.5], 0.33) == 3
    assert first_crossing([10, 20], [0.9, 1.0], 0.33) == 10
    with pytest.raises(CalibrationError):
        first_crossing([1, 2], [0.1, 0.2], 0.33)


def test_patch_stats_distance_properties():
    rng = np.random.default_rng(6)
    a = rng.random((3, 16, 16, 3))
    assert np.all(patch_stats_distance(a, a) == 0)
    b = a.copy()
    b[..., 0] = 1 - b[..., 0]
    assert np.all(patch_stats_distance(a, b) > 0)
    assert np.allclose(patch_stats_distance(a, b), patch_stats_distance(b, a))


def test_zero_stub_never_reaches_threshold(zero_denoiser, x0):
    # P_t == x0 at every step, so the distance curve is identically zero
    ts, d = distance_curve(zero_denoiser, default_schedule(100), x0, num_steps=10)
    assert np.allclose(d, 0, atol=1e-9)
    with pytest.raises(CalibrationError):
        compute_t_edit(zero_denoiser, default_schedule(100), x0, num_steps=10)
    with pytest.raises(CalibrationError):
        compute_t_edit(zero_denoiser, default_schedule(100), x0[:0])


class DriftDenoiser:
    """eps = t / 100 everywhere: predicted x0 moves away from the input as t grows."""

    def __call__(self, x, t, h_override=None, return_h=False):
        out = (t.double() / 100).view(-1, 1, 1, 1).expand_as(x).to(x.dtype)
        return (out, x[:, :, :1, :1]) if return_h else out


def test_t_edit_is_first_crossing_of_monotone_curve():
    s = default_schedule(100)
    x0 = torch.zeros(2, 3, 16, 16, dtype=torch.float64)
    ts, d = distance_curve(DriftDenoiser(), s, x0, num_steps=25)
    assert np.all(np.diff(d) >= -1e-12)
    t_edit = compute_t_edit(DriftDenoiser(), s, x0, threshold=0.33, num_steps=25)
    assert t_edit == first_crossing(ts, d, 0.33)
    assert d[list(ts).index(t_edit)] >= 0.33
    if t_edit != ts[0]:
        assert d[list(ts).index(t_edit) - 1] < 0.33


@pytest.mark.parametrize("threshold,expected", [(0.33, 33), (0.0, 1)])
def test_linear_ramp_distance(zero_denoiser, x0, threshold, expected):
    ramp = lambda x, p, t: np.full(len(x), t / 100)
    assert compute_t_edit(zero_denoiser, default_schedule(100), x0, ramp, threshold) == expected


# --- trained toy denoiser -------------------------------------------------

def test_content_colour_moves_into_output(toy_denoiser):
    model, s = toy_denoiser
    inj = toy_config(0).injection
    train, _ = generate_dataset(DatasetSpec(seed=0))
    calib = to_model_range(train.images[:inj.calibration_images])
    t_edit = compute_t_edit(model, s, calib, threshold=inj.calibration_threshold, num_steps=inj.num_steps)
    contents, originals = [], []
    for c in range(3):
        contents += list(np.nonzero(train.is_conflict & (train.class_labels == c))[0][:4])
        originals += list(np.nonzero(~train.is_conflict & (train.class_labels == c))[0][:4])
    grid = model.bottleneck_shape[1]
    mask = foreground_mask(train.images[originals], grid) | foreground_mask(train.images[contents], grid)
    content = ddim_invert(to_model_range(train.images[contents]), model, s, inj.num_steps)
    x_T = ddim_invert(to_model_range(train.images[originals]), model, s, inj.num_steps, record_h=False).x_T
    cfg = InjectionConfig(0.9, t_edit, None, mask, 1.0, inj.num_steps)
    out = reverse_with_injection(x_T, content, model, s, cfg, torch.Generator().manual_seed(0))
    hue = foreground_hue(out)
    to_content = np.nanmean(hue_distance(hue, foreground_hue(train.images[contents])))
    to_original = np.nanmean(hue_distance(hue, foreground_hue(train.images[originals])))
    assert to_content < to_original
