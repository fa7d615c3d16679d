"""DDIM inversion and reversal with h-space content injection.

The reversal uses the asymmetric update

    x_{t'} = sqrt(a_{t'}) * P_t(eps~) + sqrt(1 - a_{t'} - sigma^2) * eps + sigma * z

where ``eps~`` comes from a decoder pass whose bottleneck was replaced by the
Slerp mix of the original and content activations, ``eps`` from the untouched
pass, ``P_t`` is the predicted clean image and ``a`` the cumulative alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, from_model_range
from .errors import CalibrationError, ConfigError, DomainError, NumericalError


@dataclass
class InjectionConfig:
    gamma_inject: float = 0.9
    t_edit: int | None = None
    t_boost: int | None = None
    mask: np.ndarray | None = None
    eta_boost: float = 1.0
    num_steps: int | None = None

    def resolved(self, schedule: NoiseSchedule) -> "InjectionConfig":
        """Copy with defaults filled in and checked against ``schedule``.

        An unset t_boost becomes 0.2 T, capped at t_edit.
        """
        T = schedule.T
        t_edit = T if self.t_edit is None else int(self.t_edit)
        t_boost = min(int(round(0.2 * T)), t_edit) if self.t_boost is None else int(self.t_boost)
        cfg = InjectionConfig(self.gamma_inject, t_edit, t_boost, self.mask, self.eta_boost,
                              T if self.num_steps is None else int(self.num_steps))
        cfg.validate(T)
        return cfg

    def validate(self, T: int) -> None:
        if not 0.0 <= self.gamma_inject <= 1.0:
            raise ConfigError(f"gamma_inject must be in [0, 1], got {self.gamma_inject}")
        if not 0.0 <= self.eta_boost <= 1.0:
            raise ConfigError(f"eta_boost must be in [0, 1], got {self.eta_boost}")
        if not (T >= self.t_edit >= self.t_boost >= 0):
            raise ConfigError(f"need T >= t_edit >= t_boost >= 0, got T={T}, "
                              f"t_edit={self.t_edit}, t_boost={self.t_boost}")
        if self.num_steps is not None and not 1 <= self.num_steps <= T:
            raise ConfigError(f"num_steps must be in [1, {T}]")


def timestep_sequence(T: int, num_steps: int | None = None) -> np.ndarray:
    """Increasing visited timesteps ending at T; all of 1..T when num_steps == T."""
    n = T if num_steps is None else num_steps
    seq = np.unique(np.round(np.linspace(0, T, n + 1)).astype(np.int64))[1:]
    return seq


# --- Slerp and bottleneck mixing ----------------------------------------

def slerp(a, b, gamma: float, eps: float = 1e-6):
    """Spherical interpolation along the last axis; linear when the angle < ``eps``.

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must be in [0, 1], got {gamma}")
    as_numpy = isinstance(a, np.ndarray)
    ta, tb = torch.as_tensor(a), torch.as_tensor(b)
    if ta.shape != tb.shape:
        raise DomainError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if gamma == 0.0:
        out = ta.clone()
    elif gamma == 1.0:
        out = tb.clone()
    else:
        a64, b64 = ta.double(), tb.double()
        na, nb = a64.norm(dim=-1, keepdim=True), b64.norm(dim=-1, keepdim=True)
        if bool((na == 0).any()) or bool((nb == 0).any()):
            raise DomainError("slerp of a zero-norm vector is undefined")
        cos = ((a64 * b64).sum(-1, keepdim=True) / (na * nb)).clamp(-1.0, 1.0)
        omega = torch.arccos(cos)
        small = omega < eps
        safe = torch.where(small, torch.ones_like(omega), omega)
        wa = torch.where(small, 1.0 - gamma, torch.sin((1.0 - gamma) * safe) / torch.sin(safe))
        wb = torch.where(small, torch.full_like(omega, gamma), torch.sin(gamma * safe) / torch.sin(safe))
        out = (wa * a64 + wb * b64).to(ta.dtype)
    return out.numpy() if as_numpy else out


def inject_h(h_orig, h_content, gamma: float, mask=None):
    """Mix content into the original bottleneck activation.

    ``h`` is (C, H, W) or batched (B, C, H, W). Per sample, the content is
    rescaled onto the norm of the original over the injected region and the
    two are Slerped at ratio ``gamma``. ``mask`` is (H, W) or (B, H, W) over
    the bottleneck grid; entries outside it are returned unchanged.
    """
    as_numpy = isinstance(h_orig, np.ndarray)
    ho, hc = torch.as_tensor(h_orig), torch.as_tensor(h_content)
    if ho.shape != hc.shape:
        raise DomainError(f"h shape mismatch {tuple(ho.shape)} vs {tuple(hc.shape)}")
    single = ho.ndim == 3
    if single:
        ho, hc = ho[None], hc[None]
    if ho.ndim != 4:
        raise DomainError("h must be (C,H,W) or (B,C,H,W)")
    out = ho.clone()
    if gamma == 0.0:
        pass
    elif mask is None:
        flat_o, flat_c = ho.flatten(1), hc.flatten(1)
        out = _mix(flat_o, flat_c, gamma).view_as(ho)
    else:
        m = torch.as_tensor(np.asarray(mask)).bool()
        if m.ndim == 2:
            m = m.expand(ho.shape[0], *m.shape)
        if tuple(m.shape) != (ho.shape[0], *ho.shape[2:]):
            raise DomainError(f"mask shape {tuple(m.shape)} does not match bottleneck grid {tuple(ho.shape[2:])}")
        for i in range(ho.shape[0]):
            if not bool(m[i].any()):
                continue
            region_o = ho[i][:, m[i]].reshape(1, -1)
            region_c = hc[i][:, m[i]].reshape(1, -1)
            mixed = _mix(region_o, region_c, gamma).view(ho.shape[1], -1)
            out[i][:, m[i]] = mixed
    out = out[0] if single else out
    return out.numpy() if as_numpy else out


def _mix(flat_o, flat_c, gamma):
    norm_o = flat_o.norm(dim=1, keepdim=True)
    norm_c = flat_c.norm(dim=1, keepdim=True)
    if bool((norm_c == 0).any()) or bool((norm_o == 0).any()):
        raise DomainError("cannot inject into or from an all-zero bottleneck region")
    return slerp(flat_o, flat_c / norm_c * norm_o, gamma)


# --- DDIM ---------------------------------------------------------------

@dataclass
class LatentTrajectory:
    """Terminal latent of an inversion plus the bottleneck seen at each step."""

    x_T: torch.Tensor
    timesteps: np.ndarray
    hs: list[torch.Tensor] = field(default_factory=list)
    xs: list[torch.Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.timesteps)

    def h_at(self, t: int) -> torch.Tensor:
        idx = np.searchsorted(self.timesteps, t)
        if idx >= len(self.timesteps) or self.timesteps[idx] != t:
            raise DomainError(f"no recorded h at timestep {t}")
        return self.hs[idx]


def _coef(schedule: NoiseSchedule, t: int) -> float:
    return float(schedule.alpha_bar(int(t)))


def _check_finite(x, step, what):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite {what} at step {step}")


@torch.no_grad()
def ddim_invert(x0: torch.Tensor, denoiser, schedule: NoiseSchedule, num_steps: int | None = None,
                record_h: bool = True, record_x: bool = False) -> LatentTrajectory:
    """Deterministic DDIM stepping from the clean image up to x_T.

    The step s -> t uses eps_theta(x_s, t); the bottleneck of that pass is
    recorded as h_t, aligned with the reverse pass that later evaluates at t.
    """
    seq = timestep_sequence(schedule.T, num_steps)
    x = x0
    traj = LatentTrajectory(x_T=x0, timesteps=seq)
    prev = 0
    for step, t in enumerate(seq):
        eps, h = denoiser(x, torch.full((x.shape[0],), int(t)), return_h=True)
        a_s, a_t = _coef(schedule, prev), _coef(schedule, t)
        x0_pred = (x - (1 - a_s) ** 0.5 * eps) / a_s ** 0.5
        x = a_t ** 0.5 * x0_pred + (1 - a_t) ** 0.5 * eps
        _check_finite(x, step, "inversion latent")
        if record_h:
            traj.hs.append(h)
        if record_x:
            traj.xs.append(x)
        prev = int(t)
    traj.x_T = x
    return traj


@torch.no_grad()
def ddim_reconstruct(x_T: torch.Tensor, denoiser, schedule: NoiseSchedule,
                     num_steps: int | None = None) -> torch.Tensor:
    """Plain deterministic DDIM sampling from x_T to the clean image (model range)."""
    seq = timestep_sequence(schedule.T, num_steps)
    x = x_T
    for i in range(len(seq) - 1, -1, -1):
        t, t_prev = int(seq[i]), int(seq[i - 1]) if i > 0 else 0
        eps = denoiser(x, torch.full((x.shape[0],), t))
        a_t, a_p = _coef(schedule, t), _coef(schedule, t_prev)
        x0_pred = (x - (1 - a_t) ** 0.5 * eps) / a_t ** 0.5
        x = a_p ** 0.5 * x0_pred + (1 - a_p) ** 0.5 * eps
        _check_finite(x, i, "reverse latent")
    return x


def _encode_decode(denoiser, x, t):
    """Split forward pass when the denoiser exposes it, else read h via return_h."""
    tt = torch.full((x.shape[0],), int(t))
    if hasattr(denoiser, "encode") and hasattr(denoiser, "decode"):
        h, skips, temb = denoiser.encode(x, tt)
        return h, denoiser.decode(h, skips, temb), lambda hh: denoiser.decode(hh, skips, temb)
    eps, h = denoiser(x, tt, return_h=True)
    return h, eps, lambda hh: denoiser(x, tt, h_override=hh)


@torch.no_grad()
def reverse_with_injection(x_T: torch.Tensor, content: LatentTrajectory, denoiser,
                           schedule: NoiseSchedule, cfg: InjectionConfig,
                           generator: torch.Generator | None = None, content_index=None,
                           return_latent: bool = False):
    """Generate from the original's x_T while injecting the content bottleneck.

    For t >= t_edit the predicted-x0 term uses the injected pass and the
    direction term the untouched one; steps with t <= t_boost add noise with
    DDPM-style sigma scaled by ``eta_boost``. ``content_index[i]`` picks the
    content trajectory row for original ``i`` (identity by default).
    Returns [0,1] NHWC images, or the model-range tensor with ``return_latent``.
    """
    cfg = cfg.resolved(schedule)
    seq = content.timesteps
    if cfg.num_steps and len(timestep_sequence(schedule.T, cfg.num_steps)) != len(seq):
        raise ConfigError("content trajectory was recorded with a different step count")
    n = x_T.shape[0]
    if content_index is None:
        content_index = torch.arange(n)
    content_index = torch.as_tensor(content_index, dtype=torch.long)
    mask = cfg.mask
    x = x_T
    for i in range(len(seq) - 1, -1, -1):
        t, t_prev = int(seq[i]), int(seq[i - 1]) if i > 0 else 0
        a_t, a_p = _coef(schedule, t), _coef(schedule, t_prev)
        h, eps, decode = _encode_decode(denoiser, x, t)
        if t >= cfg.t_edit:
            h_content = content.hs[i][content_index]
            eps_pred = decode(inject_h(h, h_content, cfg.gamma_inject, mask))
        else:
            eps_pred = eps
        sigma = 0.0
        if t <= cfg.t_boost and cfg.eta_boost > 0:
            sigma = cfg.eta_boost * ((1 - a_p) / (1 - a_t)) ** 0.5 * (1 - a_t / a_p) ** 0.5
        x0_pred = (x - (1 - a_t) ** 0.5 * eps_pred) / a_t ** 0.5
        x = a_p ** 0.5 * x0_pred + max(1 - a_p - sigma ** 2, 0.0) ** 0.5 * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        _check_finite(x, i, "reverse latent")
    return x if return_latent else from_model_range(x)


# --- t_edit calibration -------------------------------------------------

def patch_stats_distance(x, y, patch: int = 8) -> np.ndarray:
    """Per-image distance between [0,1] NHWC batches from local colour statistics.

    Each image is cut into ``patch`` x ``patch`` tiles; per tile and channel
    the mean and variance are stacked, and the L2 distance between the two
    images' tile vectors is averaged over tiles.
    """
    def stats(img):
        t = torch.as_tensor(np.asarray(img), dtype=torch.float64).permute(0, 3, 1, 2)
        mean = F.avg_pool2d(t, patch)
        var = F.avg_pool2d(t * t, patch) - mean * mean
        return torch.cat([mean, var], dim=1)

    sx, sy = stats(x), stats(y)
    return (sx - sy).pow(2).sum(1).sqrt().mean((1, 2)).numpy()


def first_crossing(timesteps, distances, threshold: float) -> int:
    """First timestep (scanning upward) whose distance reaches ``threshold``."""
    distances = np.asarray(distances, dtype=np.float64)
    hits = np.nonzero(distances >= threshold)[0]
    if len(hits) == 0:
        raise CalibrationError(f"threshold {threshold} never reached; max distance "
                               f"{distances.max():.4f}")
    return int(np.asarray(timesteps)[hits[0]])


def default_distance(x, p_t, t) -> np.ndarray:
    """Patch-statistics distance; the timestep is unused."""
    return patch_stats_distance(x, p_t)


@torch.no_grad()
def distance_curve(denoiser, schedule: NoiseSchedule, images: torch.Tensor, distance_fn=None,
                   num_steps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean distance between each image and its predicted x0 along the inversion.

    ``distance_fn(x, p_t, t)`` gets [0,1] NHWC batches and the timestep and
    returns per-image distances.
    """
    distance_fn = distance_fn or default_distance
    traj = ddim_invert(images, denoiser, schedule, num_steps, record_h=False, record_x=True)
    ref = from_model_range(images)
    dists = []
    for t, xt in zip(traj.timesteps, traj.xs):
        a_t = _coef(schedule, t)
        eps = denoiser(xt, torch.full((xt.shape[0],), int(t)))
        p_t = (xt - (1 - a_t) ** 0.5 * eps) / a_t ** 0.5
        dists.append(float(np.mean(distance_fn(ref, from_model_range(p_t), int(t)))))
    return traj.timesteps, np.array(dists)


def compute_t_edit(denoiser, schedule: NoiseSchedule, calibration_images: torch.Tensor,
                   distance_fn=None, threshold: float = 0.33, num_steps: int | None = None) -> int:
    """Smallest timestep at which the predicted x0 is ``threshold`` away from the input."""
    if len(calibration_images) == 0:
        raise CalibrationError("empty calibration set")
    ts, dists = distance_curve(denoiser, schedule, calibration_images, distance_fn, num_steps)
    return first_crossing(ts, dists, threshold)
