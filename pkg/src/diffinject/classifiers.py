"""Bias classifier (GCE), loss ranking, debiased classifier and evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bias_bench import Dataset
from .errors import ConfigError, DomainError, TrainingError
from .seeding import derive_seed, stream

CHECKPOINT_FORMAT = "diffinject.classifier"
CHECKPOINT_VERSION = 1


def _check_probs(probs, y, q):
    p = np.asarray(probs, dtype=np.float64)
    if not 0.0 < q <= 1.0:
        raise DomainError(f"q must be in (0, 1], got {q}")
    if p.ndim != 1 or not 0 <= y < len(p):
        raise DomainError("y must index into a 1-D probability vector")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("probs must lie in [0, 1] and sum to 1")
    return float(p[y])


def gce_loss(probs, y: int, q: float) -> float:
    """Generalized cross-entropy (1 - p_y^q) / q."""
    p_y = _check_probs(probs, y, q)
    return (1.0 - p_y ** q) / q


def gce_gradient_factor(probs, y: int, q: float) -> float:
    """p_y^q: the factor by which the GCE gradient rescales the CE gradient."""
    return _check_probs(probs, y, q) ** q


def ce_loss(probs, y: int) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return -math.log(p[y]) if p[y] > 0 else math.inf


def gce_from_logits(logits: torch.Tensor, y: torch.Tensor, q: float) -> torch.Tensor:
    """Per-sample GCE computed from logits."""
    p_y = F.softmax(logits, dim=1).gather(1, y[:, None]).squeeze(1)
    return (1.0 - p_y.clamp_min(1e-12) ** q) / q


class MLP3(nn.Module):
    def __init__(self, in_dim: int, num_classes: int, hidden: int = 100):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x):
        return self.net(x)


class SmallConv(nn.Module):
    def __init__(self, channels: int, num_classes: int, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class ClassifierConfig:
    architecture: str = "mlp3"
    q: float = 0.7
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    hidden: int = 100
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.architecture not in ("mlp3", "small_conv"):
            raise ConfigError(f"architecture must be mlp3 or small_conv, got {self.architecture!r}")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must be in (0, 1], got {self.q}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def build_classifier(config: ClassifierConfig, image_shape, num_classes: int) -> nn.Module:
    h, w, c = image_shape
    if config.architecture == "mlp3":
        return MLP3(h * w * c, num_classes, config.hidden)
    return SmallConv(c, num_classes)


def _to_input(images) -> torch.Tensor:
    return torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def _augment(x: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Random crop after reflection padding, then random horizontal flip."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    out[flip] = out[flip].flip(-1)
    return out


@dataclass
class TrainRecord:
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def train_classifier(dataset: Dataset, config: ClassifierConfig, loss: str = "ce",
                     num_classes: int | None = None, stream_name: str = "classifier"):
    """Fixed-epoch Adam training with CE or GCE; no early stopping."""
    config.validate()
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if loss not in ("ce", "gce"):
        raise ConfigError(f"unknown loss {loss!r}")
    num_classes = num_classes or int(dataset.class_labels.max()) + 1
    torch.manual_seed(derive_seed(config.seed, stream_name, "init"))
    model = build_classifier(config, dataset.images.shape[1:], num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = stream(config.seed, stream_name, "order")
    x_all = _to_input(dataset.images)
    y_all = torch.as_tensor(dataset.class_labels)
    record = TrainRecord()
    n = len(dataset)
    model.train()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(perm[start:start + config.batch_size])
            xb, yb = x_all[idx], y_all[idx]
            if config.augment:
                xb = _augment(xb, rng)
            logits = model(xb)
            per = gce_from_logits(logits, yb, config.q) if loss == "gce" else F.cross_entropy(logits, yb, reduction="none")
            batch_loss = per.mean()
            if not torch.isfinite(batch_loss):
                raise TrainingError(f"non-finite {loss} loss in epoch {epoch}")
            opt.zero_grad()
            batch_loss.backward()
            opt.step()
            total += float(per.detach().sum())
            correct += int((logits.argmax(1) == yb).sum())
        record.epoch_losses.append(total / n)
        record.epoch_accuracy.append(correct / n)
    model.eval()
    return model, record


def train_bias_classifier(dataset: Dataset, config: ClassifierConfig, num_classes: int | None = None):
    """Deliberately overfit a classifier to the dataset's shortcut with GCE."""
    return train_classifier(dataset, config, "gce", num_classes, "bias_classifier")


def train_debiased_classifier(d_total: Dataset, config: ClassifierConfig, num_classes: int | None = None,
                              stream_name: str = "debiased_classifier"):
    """Plain cross-entropy training on the combined (synthetic + original) set."""
    return train_classifier(d_total, config, "ce", num_classes, stream_name)


@torch.no_grad()
def predict_proba(model, images, batch_size: int = 512) -> np.ndarray:
    """Softmax outputs; ``model`` is a module or any callable on NCHW tensors."""
    x = _to_input(images)
    outs = [F.softmax(model(x[i:i + batch_size]).float(), dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(outs).double().numpy() if outs else np.zeros((0, 0))


@dataclass(frozen=True)
class LossRanking:
    entries: tuple[tuple[int, float], ...]
    K: int

    @property
    def sample_ids(self) -> list[int]:
        return [sid for sid, _ in self.entries]

    def to_lines(self) -> str:
        return "sample_id,ce_loss\n" + "".join(f"{sid},{loss!r}\n" for sid, loss in self.entries)

    @classmethod
    def from_lines(cls, text: str) -> "LossRanking":
        rows = [line.split(",") for line in text.strip().splitlines()[1:]]
        entries = tuple((int(a), float(b)) for a, b in rows)
        return cls(entries, len(entries))


def rank_losses(sample_ids, losses, K: int) -> LossRanking:
    """Top-K by descending loss, ties broken by ascending sample_id."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    losses = np.asarray(losses, dtype=np.float64)
    if not 1 <= K <= len(sample_ids):
        raise DomainError(f"K must be in [1, {len(sample_ids)}], got {K}")
    order = np.lexsort((sample_ids, -losses))[:K]
    return LossRanking(tuple((int(sample_ids[i]), float(losses[i])) for i in order), K)


def per_sample_ce(model, dataset: Dataset) -> np.ndarray:
    probs = predict_proba(model, dataset.images)
    p_y = probs[np.arange(len(dataset)), dataset.class_labels]
    return -np.log(np.clip(p_y, 1e-300, None))


def rank_by_ce_loss(model, dataset: Dataset, K: int = 10) -> LossRanking:
    """The K training samples the bias classifier finds hardest under CE."""
    if not 1 <= K <= len(dataset):
        raise DomainError(f"K must be in [1, {len(dataset)}], got {K}")
    return rank_losses(dataset.sample_ids, per_sample_ce(model, dataset), K)


def evaluate(model, dataset: Dataset) -> dict:
    """Overall accuracy, plus aligned/conflict breakdown when bias labels exist."""
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    pred = predict_proba(model, dataset.images).argmax(1)
    hit = pred == dataset.class_labels
    result = {"accuracy": float(hit.mean()), "count": int(len(hit))}
    if dataset.has_bias_labels:
        for name, sel in (("aligned", ~dataset.is_conflict), ("conflict", dataset.is_conflict)):
            result[f"{name}_count"] = int(sel.sum())
            result[f"{name}_accuracy"] = float(hit[sel].mean()) if sel.any() else None
    return result


def save_classifier(path, model: nn.Module, config: ClassifierConfig, image_shape, num_classes: int,
                    extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "image_shape": list(image_shape),
        "num_classes": num_classes,
        "state_dict": model.state_dict(),
        "seed": config.seed,
        "extra": extra or {},
    }, path)


def load_classifier(path) -> tuple[nn.Module, ClassifierConfig]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise TrainingError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise TrainingError(f"{path} is not a version-{CHECKPOINT_VERSION} classifier checkpoint")
    config = ClassifierConfig(**blob["config"])
    model = build_classifier(config, blob["image_shape"], blob["num_classes"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config
