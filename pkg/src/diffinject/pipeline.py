"""Stage orchestration: data -> bias classifier -> top-K -> diffusion -> injection -> retraining.

Artifacts live in a content-addressed store: every stage writes into
``<store>/stages/<stage>-<key>`` where ``key`` hashes the stage's own config,
its resolved seed and the keys of the stages it reads. A ``DONE`` marker makes
the directory reusable, so reruns and ``--resume`` skip finished work and
several runs can share one store (e.g. one pretrained denoiser).
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import bias_bench, classifiers, diffusion, injector
from .bias_bench import Dataset, DatasetSpec, round_half_up
from .classifiers import ClassifierConfig, LossRanking
from .config import RunConfig, config_hash
from .errors import ConfigError, DiffInjectError, PairingError, StageError
from .seeding import stream, torch_generator

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-bias", "extract-topk", "train-diffusion", "inject",
          "train-vanilla", "train-debiased", "evaluate")

PROVENANCE_FIELDS = ("sample_id", "content_id", "original_id", "gamma", "t_edit", "t_boost",
                     "seed", "assigned_label")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --- synthetic set construction -----------------------------------------

@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    class_label: int
    content_id: int
    original_id: int


def pair_samples(topk_ids, d_orig: Dataset, n_syn: int, rng: np.random.Generator,
                 same_class: bool = True) -> list[tuple[int, int]]:
    """(content_id, original_id) pairs.

    Contents are drawn uniformly with replacement from ``topk_ids``; each
    original is drawn uniformly from the non-top-K samples (of the content's
    class when ``same_class``).
    """
    topk_ids = [int(s) for s in topk_ids]
    if not topk_ids:
        raise PairingError("empty top-K set")
    in_topk = np.isin(d_orig.sample_ids, topk_ids)
    labels = dict(zip(d_orig.sample_ids.tolist(), d_orig.class_labels.tolist()))
    pool_all = d_orig.sample_ids[~in_topk]
    pools = {}
    pairs = []
    for _ in range(n_syn):
        content = topk_ids[rng.integers(len(topk_ids))]
        cls = labels[content]
        if same_class:
            if cls not in pools:
                pools[cls] = d_orig.sample_ids[~in_topk & (d_orig.class_labels == cls)]
            pool = pools[cls]
        else:
            pool = pool_all
        if len(pool) == 0:
            raise PairingError(f"no non-top-K original available for class {cls}")
        pairs.append((content, int(pool[rng.integers(len(pool))])))
    return pairs


def foreground_mask(images: np.ndarray, grid: int, threshold: float = 0.15,
                    coverage: float = 0.05) -> np.ndarray:
    """Bottleneck-grid mask of pixels that differ from the border colour.

    The background is estimated as the per-channel median of the border
    pixels; a grid cell is on when more than ``coverage`` of its pixels
    deviate from it by more than ``threshold`` in some channel.
    """
    imgs = np.asarray(images, dtype=np.float64)
    border = np.concatenate([imgs[:, 0], imgs[:, -1], imgs[:, :, 0], imgs[:, :, -1]], axis=1)
    bg = np.median(border, axis=1)[:, None, None, :]
    fg = (np.abs(imgs - bg).max(-1) > threshold).astype(np.float64)
    pooled = F.adaptive_avg_pool2d(torch.as_tensor(fg)[:, None], grid)[:, 0].numpy()
    return pooled > coverage


def load_mask_file(path, grid: int) -> np.ndarray:
    """0/1 raster at bottleneck resolution, from ``.npy`` or any image file."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    arr = np.asarray(arr)
    if arr.shape != (grid, grid):
        raise ConfigError(f"mask {path} has shape {arr.shape}, expected {(grid, grid)}")
    return arr > (127 if arr.dtype == np.uint8 and arr.max() > 1 else 0)


def synthesize(denoiser, schedule, d_orig: Dataset, pairs, cfg: injector.InjectionConfig,
               mask_mode="auto", bias_kind: str = "color", seed: int = 0,
               batch_size: int = 64, workers: int = 1) -> np.ndarray:
    """Run inversion + injected reversal for every (content, original) pair.

    Every batch draws its boost noise from its own named stream, so results do
    not depend on ``workers``.
    """
    cfg = cfg.resolved(schedule)
    if not pairs:
        return np.zeros((0, *d_orig.images.shape[1:]), np.float32)
    content_ids = sorted({c for c, _ in pairs})
    c_idx = d_orig.index_of(content_ids)
    content_traj = injector.ddim_invert(diffusion.to_model_range(d_orig.images[c_idx]), denoiser,
                                        schedule, cfg.num_steps, record_h=True)
    row_of = {cid: i for i, cid in enumerate(content_ids)}
    grid = denoiser.bottleneck_shape[1]

    def job(b):
        chunk = pairs[b * batch_size:(b + 1) * batch_size]
        o_idx = d_orig.index_of([o for _, o in chunk])
        originals = d_orig.images[o_idx]
        x_T = injector.ddim_invert(diffusion.to_model_range(originals), denoiser, schedule,
                                   cfg.num_steps, record_h=False).x_T
        mask = _resolve_mask(mask_mode, bias_kind, originals, d_orig.images[d_orig.index_of([c for c, _ in chunk])], grid)
        job_cfg = injector.InjectionConfig(cfg.gamma_inject, cfg.t_edit, cfg.t_boost, mask,
                                           cfg.eta_boost, cfg.num_steps)
        gen = torch_generator(seed, "inject", "job", b)
        return injector.reverse_with_injection(x_T, content_traj, denoiser, schedule, job_cfg, gen,
                                               content_index=[row_of[c] for c, _ in chunk])

    n_jobs = (len(pairs) + batch_size - 1) // batch_size
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, range(n_jobs)))
    else:
        parts = [job(b) for b in range(n_jobs)]
    return np.concatenate(parts)


def _resolve_mask(mode, bias_kind, originals, contents, grid):
    if isinstance(mode, np.ndarray):
        return mode
    if mode == "auto":
        mode = "foreground" if bias_kind == "color" else "none"
    if mode == "none":
        return None
    if mode == "foreground":
        return foreground_mask(originals, grid) | foreground_mask(contents, grid)
    raise ConfigError(f"injection.mask: unknown mode {mode!r}")


def build_syn_dataset(topk: LossRanking, d_orig: Dataset, denoiser, schedule,
                      cfg: injector.InjectionConfig, ratio: float = 0.1, seed: int = 0,
                      same_class: bool = True, mask_mode="auto", bias_kind: str = "color",
                      batch_size: int = 64, workers: int = 1) -> tuple[Dataset, list[dict]]:
    """Synthesise round(ratio * |D_orig|) samples labelled by their content sample.

    Returns the synthetic dataset (ids continue after the originals) and one
    provenance record per sample.
    """
    resolved = cfg.resolved(schedule)
    n_syn = round_half_up(ratio * len(d_orig))
    pairs = pair_samples(topk.sample_ids, d_orig, n_syn, stream(seed, "inject", "pairing"), same_class)
    images = synthesize(denoiser, schedule, d_orig, pairs, resolved, mask_mode, bias_kind, seed,
                        batch_size, workers)
    images = np.round(images * 255) / 255
    labels = d_orig.class_labels[d_orig.index_of([c for c, _ in pairs])] if pairs else np.zeros(0, np.int64)
    base = int(d_orig.sample_ids.max()) + 1
    ids = np.arange(base, base + n_syn)
    d_syn = Dataset(images.reshape(n_syn, *d_orig.images.shape[1:]), labels, None, None, ids,
                    d_orig.spec, "synthetic")
    provenance = [
        {"sample_id": int(sid), "content_id": c, "original_id": o, "gamma": resolved.gamma_inject,
         "t_edit": resolved.t_edit, "t_boost": resolved.t_boost, "seed": seed,
         "assigned_label": int(lbl)}
        for sid, (c, o), lbl in zip(ids, pairs, labels)
    ]
    return d_syn, provenance


def write_provenance(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, PROVENANCE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_provenance(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ints = ("sample_id", "content_id", "original_id", "t_edit", "t_boost", "seed", "assigned_label")
    return [{k: (int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


# --- stages -------------------------------------------------------------

class Pipeline:
    """Resolves stage keys and runs stages against an artifact store."""

    def __init__(self, cfg: RunConfig, out=None, store=None):
        self.cfg = cfg.validate()
        self.out = Path(out if out is not None else cfg.out)
        self.store = Path(store if store is not None else (cfg.pipeline.store or self.out / "store"))
        self._keys: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.skipped: list[str] = []

    # keys and locations

    def deps(self, stage: str) -> tuple[str, ...]:
        return {
            "gen-data": (),
            "train-bias": ("gen-data",),
            "extract-topk": ("gen-data", "train-bias"),
            "train-diffusion": ("gen-data",) if self.cfg.diffusion.train_source == "train" else (),
            "inject": ("gen-data", "extract-topk", "train-diffusion"),
            "train-vanilla": ("gen-data",),
            "train-debiased": ("gen-data", "inject"),
            "evaluate": ("gen-data", "train-vanilla", "train-debiased"),
        }[stage]

    def _own_config(self, stage: str) -> dict:
        c = self.cfg
        if stage == "gen-data":
            return {"data": asdict(c.data), "seed": c.section_seed("data")}
        if stage == "train-bias":
            return {"bias_classifier": asdict(c.bias_classifier), "seed": c.section_seed("bias_classifier"),
                    "num_classes": c.data.num_classes}
        if stage == "extract-topk":
            return {"K": c.pipeline.K}
        if stage == "train-diffusion":
            own = {"diffusion": asdict(c.diffusion), "seed": c.section_seed("diffusion")}
            if c.diffusion.train_source == "pretrain":
                own["domain"] = {k: getattr(c.data, k) for k in ("num_classes", "image_size", "bias_kind")}
            return own
        if stage == "inject":
            inj = asdict(c.injection)
            inj.pop("workers")
            return {"injection": inj, "seed": c.section_seed("injection"),
                    "ratio": c.pipeline.bias_conflict_ratio_syn,
                    "same_class": c.pipeline.same_class_pairing}
        if stage in ("train-vanilla", "train-debiased"):
            return {"classifier": asdict(c.classifier), "seed": c.section_seed("classifier"),
                    "num_classes": c.data.num_classes}
        return {}

    def key(self, stage: str) -> str:
        if stage not in self._keys:
            parts = {"stage": stage, "own": self._own_config(stage),
                     "deps": {d: self.key(d) for d in self.deps(stage)}}
            self._keys[stage] = config_hash(parts)
        return self._keys[stage]

    def dir(self, stage: str) -> Path:
        return self.store / "stages" / f"{stage}-{self.key(stage)}"

    def done(self, stage: str) -> bool:
        return (self.dir(stage) / "DONE").is_file()

    # execution

    def run_stage(self, stage: str, resume: bool = True, upstream: bool = True) -> Path:
        """Run ``stage`` (and, with ``upstream``, any missing dependency)."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        for dep in self.deps(stage):
            if not self.done(dep):
                if not upstream:
                    raise StageError(stage, ConfigError(f"upstream stage {dep!r} has not been run"))
                self.run_stage(dep, resume, upstream)
        target = self.dir(stage)
        if resume and self.done(stage):
            self.skipped.append(stage)
            log.info("%s: reusing %s", stage, target)
            return target
        if target.exists():
            shutil.rmtree(target)
        target.mkdir(parents=True)
        start = time.perf_counter()
        log.info("%s: running into %s", stage, target)
        try:
            getattr(self, "_stage_" + stage.replace("-", "_"))(target)
        except DiffInjectError as exc:
            raise StageError(stage, exc) from exc
        except (RuntimeError, ValueError, OSError) as exc:
            raise StageError(stage, exc) from exc
        self.timings[stage] = time.perf_counter() - start
        _write_json(target / "config.json", {"stage": stage, "key": self.key(stage),
                                             "config": self.cfg.to_dict()})
        _write_json(target / "timing.json", {"seconds": round(self.timings[stage], 3)})
        (target / "DONE").write_text("ok\n")
        return target

    # loaders

    def train_set(self) -> Dataset:
        return bias_bench.load_dataset(self.dir("gen-data") / "train")

    def test_set(self) -> Dataset:
        return bias_bench.load_dataset(self.dir("gen-data") / "test")

    def ranking(self) -> LossRanking:
        return LossRanking.from_lines((self.dir("extract-topk") / "ranking.csv").read_text())

    def denoiser(self):
        return diffusion.load_denoiser(self.dir("train-diffusion") / "denoiser.pt")

    def syn_set(self) -> Dataset:
        return bias_bench.load_dataset(self.dir("inject") / "syn")

    def dataset_spec(self) -> DatasetSpec:
        d = self.cfg.data
        return DatasetSpec(num_classes=d.num_classes, image_size=d.image_size,
                           samples_per_class=d.samples_per_class, conflict_ratio=d.conflict_ratio,
                           bias_kind=d.bias_kind, test_samples_per_class=d.test_samples_per_class,
                           seed=self.cfg.section_seed("data"))

    def classifier_config(self, section: str) -> ClassifierConfig:
        s = getattr(self.cfg, section)
        return ClassifierConfig(s.architecture, s.q, s.learning_rate, s.epochs, s.batch_size,
                                s.hidden, s.augment, self.cfg.section_seed(section))

    def schedule(self):
        d = self.cfg.diffusion
        if d.beta_start is None:
            return diffusion.default_schedule(d.T)
        return diffusion.make_schedule(d.T, d.beta_start, d.beta_end)

    # stage bodies

    def _stage_gen_data(self, target: Path) -> None:
        d = self.cfg.data
        if d.path:
            if not d.test_path:
                raise ConfigError("data.test_path: required when data.path is set")
            train = bias_bench.ingest_folder(d.path, image_size=d.image_size, split="train")
            test = bias_bench.ingest_folder(d.test_path, image_size=d.image_size, split="unbiased_test")
        else:
            train, test = bias_bench.generate_dataset(self.dataset_spec())
        bias_bench.save_dataset(train, target / "train")
        bias_bench.save_dataset(test, target / "test")
        _write_json(target / "summary.json", {
            "train_count": len(train), "test_count": len(test),
            "train_conflicts": int(train.is_conflict.sum()),
        })

    def _stage_train_bias(self, target: Path) -> None:
        train = self.train_set()
        cfg = self.classifier_config("bias_classifier")
        model, record = classifiers.train_bias_classifier(train, cfg, self.cfg.data.num_classes)
        classifiers.save_classifier(target / "model.pt", model, cfg, train.images.shape[1:],
                                    self.cfg.data.num_classes)
        _write_json(target / "train_record.json", record.to_dict())
        _write_json(target / "metrics.json", {"train": classifiers.evaluate(model, train)})

    def _stage_extract_topk(self, target: Path) -> None:
        model, _ = classifiers.load_classifier(self.dir("train-bias") / "model.pt")
        ranking = classifiers.rank_by_ce_loss(model, self.train_set(), self.cfg.pipeline.K)
        (target / "ranking.csv").write_text(ranking.to_lines(), encoding="utf-8")

    def _stage_train_diffusion(self, target: Path) -> None:
        c = self.cfg.diffusion
        seed = self.cfg.section_seed("diffusion")
        if c.train_source == "train":
            images = self.train_set().images
        else:
            images = pretraining_corpus(self.cfg.data.num_classes, self.cfg.data.image_size,
                                        self.cfg.data.bias_kind, c.pretrain_per_class, seed)
        schedule = self.schedule()
        p2 = diffusion.P2Config(c.gamma_p2, c.k)
        model_cfg = diffusion.DenoiserConfig(image_size=self.cfg.data.image_size, base_width=c.base_width,
                                             width_mult=(1,) + (2,) * (c.levels - 1))
        train_cfg = diffusion.DiffusionTrainConfig(steps=c.steps, batch_size=c.batch_size,
                                                   learning_rate=c.learning_rate, seed=seed,
                                                   ema_decay=c.ema_decay)
        model, record = diffusion.train_diffusion(
            images, model_cfg, schedule, p2, train_cfg,
            progress=lambda step, loss: log.info("train-diffusion: step %d loss %.3f", step, loss))
        diffusion.save_denoiser(target / "denoiser.pt", model, schedule,
                                {"config": asdict(c), "seed": seed})
        diffusion.export_schedule(schedule, p2, target / "schedule.csv")
        _write_json(target / "losses.json", record.to_dict())

    def _stage_inject(self, target: Path) -> None:
        c = self.cfg.injection
        seed = self.cfg.section_seed("injection")
        d_orig = self.train_set()
        ranking = self.ranking()
        denoiser, schedule, _ = self.denoiser()
        t_edit, curve = c.t_edit, None
        if t_edit is None:
            rng = stream(seed, "inject", "calibration")
            pick = np.sort(rng.choice(len(d_orig), min(c.calibration_images, len(d_orig)), replace=False))
            ts, dists = injector.distance_curve(denoiser, schedule,
                                                diffusion.to_model_range(d_orig.images[pick]),
                                                num_steps=c.num_steps)
            curve = {"timesteps": ts.tolist(), "distance": dists.tolist()}
            t_edit = injector.first_crossing(ts, dists, c.calibration_threshold)
        mask_mode = c.mask
        if mask_mode not in ("auto", "none", "foreground"):
            mask_mode = load_mask_file(mask_mode, denoiser.bottleneck_shape[1])
        cfg = injector.InjectionConfig(c.gamma_inject, t_edit, c.t_boost, None, c.eta_boost, c.num_steps)
        d_syn, provenance = build_syn_dataset(
            ranking, d_orig, denoiser, schedule, cfg, self.cfg.pipeline.bias_conflict_ratio_syn, seed,
            self.cfg.pipeline.same_class_pairing, mask_mode, self.cfg.data.bias_kind,
            c.batch_size, c.workers)
        bias_bench.save_dataset(d_syn, target / "syn")
        write_provenance(target / "provenance.csv", provenance)
        _write_json(target / "calibration.json", {"t_edit": int(t_edit), "curve": curve,
                                                  "threshold": c.calibration_threshold})

    def _train_final(self, target: Path, data: Dataset) -> None:
        cfg = self.classifier_config("classifier")
        model, record = classifiers.train_debiased_classifier(data, cfg, self.cfg.data.num_classes,
                                                              stream_name="classifier")
        classifiers.save_classifier(target / "model.pt", model, cfg, data.images.shape[1:],
                                    self.cfg.data.num_classes)
        _write_json(target / "train_record.json", record.to_dict())
        _write_json(target / "eval.json", classifiers.evaluate(model, self.test_set()))

    def _stage_train_vanilla(self, target: Path) -> None:
        self._train_final(target, self.train_set())

    def _stage_train_debiased(self, target: Path) -> None:
        d_orig, d_syn = self.train_set(), self.syn_set()
        d_total = Dataset.concat([d_orig, d_syn]) if len(d_syn) else d_orig
        _write_json(target / "composition.json", {"orig": len(d_orig), "syn": len(d_syn),
                                                  "total": len(d_total)})
        self._train_final(target, d_total)

    def _stage_evaluate(self, target: Path) -> None:
        _write_json(target / "metrics.json", self.metrics())

    # summaries

    def metrics(self) -> dict:
        """Deterministic per-stage metrics (no timings)."""
        m = {
            "seed": self.cfg.seed,
            "conflict_ratio": self.cfg.data.conflict_ratio,
            "bias_kind": self.cfg.data.bias_kind,
            "vanilla": _read_json(self.dir("train-vanilla") / "eval.json"),
            "diffinject": _read_json(self.dir("train-debiased") / "eval.json"),
            "bias_classifier_train": _read_json(self.dir("train-bias") / "metrics.json")["train"],
        }
        train = self.train_set()
        topk = self.ranking().sample_ids
        if train.has_bias_labels:
            m["topk_true_conflicts"] = int(train.is_conflict[train.index_of(topk)].sum())
        m["topk"] = topk
        m["t_edit"] = _read_json(self.dir("inject") / "calibration.json")["t_edit"]
        m["syn_count"] = _read_json(self.dir("train-debiased") / "composition.json")["syn"]
        return m


def pretraining_corpus(num_classes: int, image_size: int, bias_kind: str, per_class: int,
                       seed: int) -> np.ndarray:
    """Glyph images with every (class, bias) pair equally represented.

    Plays the role of the broad benchmark a diffusion model is pretrained on;
    it carries no labels into the classifier stages.
    """
    spec = DatasetSpec(num_classes=num_classes, image_size=image_size, samples_per_class=1,
                       conflict_ratio=0.0, bias_kind=bias_kind, test_samples_per_class=per_class,
                       seed=seed)
    _, balanced = bias_bench.generate_dataset(spec)
    return balanced.images


def run_experiment(cfg: RunConfig, out=None, store=None, resume: bool = True) -> dict:
    """Run every stage and write ``metrics.json`` and ``record.json`` under ``out``."""
    pipe = Pipeline(cfg, out, store)
    pipe.out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    for stage in STAGES:
        pipe.run_stage(stage, resume=resume)
    metrics = pipe.metrics()
    _write_json(pipe.out / "metrics.json", metrics)
    (pipe.out / "config.yaml").write_text(cfg.dumps(), encoding="utf-8")
    record = {
        "metrics": metrics,
        "seeds": {s: cfg.section_seed(s) for s in ("data", "bias_classifier", "classifier",
                                                  "diffusion", "injection")},
        "global_seed": cfg.seed,
        "stages": {s: {"key": pipe.key(s), "path": str(pipe.dir(s)),
                       "seconds": round(pipe.timings.get(s, 0.0), 3),
                       "skipped": s in pipe.skipped} for s in STAGES},
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
    }
    _write_json(pipe.out / "record.json", record)
    return record
