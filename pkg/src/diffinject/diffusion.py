"""Noise schedule, forward process, P2-weighted objective and the U-Net denoiser.

Timesteps run from 1 to T. ``alpha_cum[t - 1]`` holds the cumulative product
prod_{s<=t}(1 - beta_s); timestep 0 is the clean image with alpha_cum = 1.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .errors import ConfigError, DomainError, TrainingError
from .seeding import derive_seed, stream, torch_generator

CHECKPOINT_FORMAT = "diffinject.denoiser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_cum: np.ndarray
    snr: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 2:
            raise ConfigError("a schedule needs at least two betas")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("every beta must lie strictly between 0 and 1")
        alpha_cum = np.cumprod(1.0 - beta)
        return cls(beta=beta, alpha_cum=alpha_cum, snr=alpha_cum / (1.0 - alpha_cum))

    def alpha_bar(self, t):
        """Cumulative alpha at integer timestep(s) ``t`` in [0, T]; t=0 gives 1."""
        padded = np.concatenate([[1.0], self.alpha_cum])
        return padded[np.asarray(t)]

    def check_timestep(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise DomainError(f"timestep out of range [1, {self.T}]: {t}")


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with cumulative products and SNR precomputed."""
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def default_schedule(T: int = 100) -> NoiseSchedule:
    """Linear schedule whose endpoints are the T=1000 values rescaled to T steps."""
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, 0.02 * scale)


@dataclass(frozen=True)
class P2Config:
    gamma_p2: float = 1.0
    k: float = 1.0

    def __post_init__(self):
        if self.gamma_p2 < 0:
            raise ConfigError("gamma_p2 must be >= 0")
        if self.k <= 0:
            raise ConfigError("k must be > 0")


def p2_weights(schedule: NoiseSchedule, p2: P2Config) -> np.ndarray:
    """P2 weights for t = 1..T, with base weight lambda_t = 1."""
    return 1.0 / (p2.k + schedule.snr) ** p2.gamma_p2


def p2_weight(schedule: NoiseSchedule, p2: P2Config, t: int) -> float:
    schedule.check_timestep(t)
    return float(p2_weights(schedule, p2)[int(t) - 1])


def export_schedule(schedule: NoiseSchedule, p2: P2Config, path) -> None:
    """Write ``t,beta,alpha_cum,snr,p2_weight`` rows for auditing."""
    weights = p2_weights(schedule, p2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_cum", "snr", "p2_weight"])
        for i in range(schedule.T):
            w.writerow([i + 1, repr(float(schedule.beta[i])), repr(float(schedule.alpha_cum[i])),
                        repr(float(schedule.snr[i])), repr(float(weights[i]))])


def read_schedule_export(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) for r in rows]) for key in rows[0]}


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise ``x0`` to timestep ``t`` (scalar or one per batch item)."""
    if x0.shape != eps.shape:
        raise DomainError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x0.shape)}")
    schedule.check_timestep(t)
    a = torch.as_tensor(schedule.alpha_bar(t), dtype=x0.dtype)
    if a.ndim == 1:
        a = a.view(-1, *([1] * (x0.ndim - 1)))
    return a.sqrt() * x0 + (1 - a).sqrt() * eps


def to_model_range(images) -> torch.Tensor:
    """[0,1] NHWC array -> [-1,1] NCHW float tensor."""
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return x.permute(0, 3, 1, 2).mul(2).sub(1).contiguous()


def from_model_range(x: torch.Tensor) -> np.ndarray:
    """[-1,1] NCHW tensor -> [0,1] NHWC float32 array (clipped)."""
    return ((x.detach().clamp(-1, 1) + 1) / 2).permute(0, 2, 3, 1).numpy().astype(np.float32)


def p2_loss(denoiser, x0: torch.Tensor, schedule: NoiseSchedule, p2: P2Config,
            generator: torch.Generator, return_terms: bool = False):
    """Mean over the batch of lambda_t^P2 * ||eps - eps_theta(x_t, t)||^2.

    ``t`` is drawn uniformly from 1..T per item, ``eps`` from a unit Gaussian.
    With ``return_terms`` the per-item timesteps, noise and weighted terms are
    returned alongside the loss.
    """
    n = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = q_sample(x0, t.numpy(), eps, schedule)
    pred = denoiser(xt, t)
    if not torch.isfinite(pred).all():
        raise TrainingError("denoiser produced non-finite output")
    weights = torch.as_tensor(p2_weights(schedule, p2)[t.numpy() - 1], dtype=x0.dtype)
    terms = weights * (eps - pred).pow(2).flatten(1).sum(1)
    loss = terms.mean()
    if return_terms:
        return loss, {"t": t, "eps": eps, "terms": terms}
    return loss


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 32
    width_mult: tuple = (1, 2, 2)
    groups: int = 8

    def __post_init__(self):
        self.width_mult = tuple(self.width_mult)
        if self.image_size % (2 ** len(self.width_mult)):
            raise ConfigError("image_size must be divisible by 2**levels")


class UNet(nn.Module):
    """Small U-Net predicting noise; the middle-block output is the h-space.

    ``encode`` returns the bottleneck ``h`` with the skip activations, and
    ``decode`` runs the upsampling path from any ``h`` of matching shape, so a
    caller can read the bottleneck and substitute its own.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        w = cfg.base_width
        t_dim = 4 * w
        self.t_mlp = nn.Sequential(nn.Linear(w, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(cfg.channels, w, 3, padding=1)

        widths = [w * m for m in cfg.width_mult]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        c = w
        for cw in widths:
            self.down_blocks.append(ResBlock(c, cw, t_dim, cfg.groups))
            self.downsamples.append(nn.Conv2d(cw, cw, 3, stride=2, padding=1))
            c = cw
        self.mid1 = ResBlock(c, c, t_dim, cfg.groups)
        self.mid2 = ResBlock(c, c, t_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        for cw in reversed(widths):
            self.up_blocks.append(ResBlock(c + cw, cw, t_dim, cfg.groups))
            c = cw
        self.norm_out = nn.GroupNorm(cfg.groups, c)
        self.conv_out = nn.Conv2d(c, cfg.channels, 3, padding=1)

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        side = self.config.image_size // 2 ** len(self.config.width_mult)
        return (self.config.base_width * self.config.width_mult[-1], side, side)

    def _temb(self, t, n):
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(n)
        return self.t_mlp(timestep_embedding(t, self.config.base_width))

    def encode(self, x, t):
        temb = self._temb(t, x.shape[0])
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid1(h, temb), temb)
        return h, skips, temb

    def decode(self, h, skips, temb):
        for block, skip in zip(self.up_blocks, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))

    def forward(self, x, t, h_override=None, return_h=False):
        h, skips, temb = self.encode(x, t)
        if h_override is not None:
            if h_override.shape != h.shape:
                raise DomainError(f"h override shape {tuple(h_override.shape)} != bottleneck {tuple(h.shape)}")
            h = h_override
        out = self.decode(h, skips, temb)
        return (out, h) if return_h else out


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 2e-4
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0
    ema_decay: float = 0.0


@dataclass
class DiffusionTrainRecord:
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def train_diffusion(images, model_config: DenoiserConfig, schedule: NoiseSchedule,
                    p2: P2Config, train_config: DiffusionTrainConfig,
                    progress=None) -> tuple[UNet, DiffusionTrainRecord]:
    """Train a U-Net on ``images`` ([0,1] NHWC) with the P2-weighted objective.

    One epoch is one shuffled pass over the images; the record holds the mean
    loss of every epoch (a trailing partial epoch included). With a non-zero
    ``ema_decay`` the returned weights are the exponential moving average of
    the iterates.
    """
    data = to_model_range(images)
    if len(data) == 0:
        raise TrainingError("empty training set")
    torch.manual_seed(derive_seed(train_config.seed, "diffusion", "init"))
    model = UNet(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    ema = None
    if train_config.ema_decay:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(train_config.ema_decay))
    noise_gen = torch_generator(train_config.seed, "diffusion", "noise")
    order_rng = stream(train_config.seed, "diffusion", "order")
    record = DiffusionTrainRecord()

    n = len(data)
    bs = min(train_config.batch_size, n)
    perm, pos, epoch_sum, epoch_count = order_rng.permutation(n), 0, 0.0, 0
    model.train()
    for step in range(train_config.steps):
        if pos + bs > n:
            record.epoch_losses.append(epoch_sum / epoch_count)
            perm, pos, epoch_sum, epoch_count = order_rng.permutation(n), 0, 0.0, 0
        batch = data[perm[pos:pos + bs]]
        pos += bs
        loss = p2_loss(model, batch, schedule, p2, noise_gen)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite diffusion loss at step {step}")
        opt.zero_grad()
        loss.backward()
        if train_config.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
        opt.step()
        if ema is not None:
            ema.update_parameters(model)
        value = float(loss.detach())
        record.step_losses.append(value)
        epoch_sum += value
        epoch_count += 1
        if progress is not None and (step + 1) % train_config.log_every == 0:
            progress(step + 1, value)
    if epoch_count:
        record.epoch_losses.append(epoch_sum / epoch_count)
    if ema is not None and train_config.steps > 0:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, record


def save_denoiser(path, model: UNet, schedule: NoiseSchedule, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "beta": schedule.beta.tolist(),
        "extra": extra or {},
    }, path)


def load_denoiser(path) -> tuple[UNet, NoiseSchedule, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise TrainingError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path} is not a version-{CHECKPOINT_VERSION} denoiser checkpoint")
    model = UNet(DenoiserConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, NoiseSchedule.from_betas(blob["beta"]), blob["extra"]
