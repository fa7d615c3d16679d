"""Accuracy tables and original / top-K / generated sample grids."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from itertools import groupby
from pathlib import Path

import numpy as np
from PIL import Image

from .bias_bench import Dataset, load_dataset
from .classifiers import LossRanking
from .errors import DomainError, ReportError
from .pipeline import read_provenance

COLUMNS = ("overall_acc", "aligned_acc", "conflict_acc")


@dataclass(frozen=True)
class MetricsRow:
    method: str
    rho: float
    bias_kind: str
    seed: int
    overall_acc: float
    aligned_acc: float | None
    conflict_acc: float | None

    def __post_init__(self):
        for name in COLUMNS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...]


def rows_from_metrics(metrics: dict) -> list[MetricsRow]:
    """Vanilla and DiffInject rows from one run's ``metrics.json``."""
    rows = []
    for method in ("vanilla", "diffinject"):
        e = metrics[method]
        rows.append(MetricsRow(method, float(metrics["conflict_ratio"]), metrics["bias_kind"],
                               int(metrics["seed"]), e["accuracy"], e.get("aligned_accuracy"),
                               e.get("conflict_accuracy")))
    return rows


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std()) if len(arr) > 1 else None


def summarize(rows) -> list[dict]:
    """Group by (method, rho, bias_kind): population mean and std over seeds."""
    key = lambda r: (r.method, r.rho, r.bias_kind)
    out = []
    for (method, rho, kind), group in groupby(sorted(rows, key=key), key=key):
        group = list(group)
        entry = {"method": method, "rho": rho, "bias_kind": kind, "n": len(group)}
        for col in COLUMNS:
            entry[col] = _mean_std(getattr(r, col) for r in group)
        out.append(entry)
    return out


def _best(summary):
    """(rho, bias_kind, column) -> best mean within that setting."""
    best = {}
    for e in summary:
        for col in COLUMNS:
            mean = e[col][0]
            k = (e["rho"], e["bias_kind"], col)
            if mean is not None and (k not in best or mean > best[k]):
                best[k] = mean
    return best


def format_table(rows) -> str:
    summary = summarize(rows)
    best = _best(summary)
    header = f"{'method':<12}{'rho':>8}{'bias':>9}{'n':>4}" + "".join(f"{c:>18}" for c in COLUMNS)
    lines = [header, "-" * len(header)]
    for e in summary:
        cells = []
        for col in COLUMNS:
            mean, std = e[col]
            if mean is None:
                cells.append(f"{'-':>18}")
                continue
            text = f"{100 * mean:.2f}" + (f" ± {100 * std:.2f}" if std is not None else "")
            mark = "*" if mean == best[(e["rho"], e["bias_kind"], col)] else " "
            cells.append(f"{text + mark:>18}")
        lines.append(f"{e['method']:<12}{e['rho']:>8.3f}{e['bias_kind']:>9}{e['n']:>4}" + "".join(cells))
    lines.append("")
    lines.append("accuracy (%) on the unbiased test split, mean ± population std over seeds; * best per column")
    return "\n".join(lines) + "\n"


def emit_table(rows, out_dir) -> MetricsTable:
    """Write ``table.txt`` (formatted) and ``table.jsonl`` (one row per line)."""
    rows = list(rows)
    if not rows:
        raise DomainError("emit_table needs at least one row")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.txt").write_text(format_table(rows), encoding="utf-8")
    with open(out_dir / "table.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return MetricsTable(tuple(rows))


def read_table(path) -> MetricsTable:
    with open(path, encoding="utf-8") as fh:
        return MetricsTable(tuple(MetricsRow(**json.loads(line)) for line in fh if line.strip()))


def grid_size(n: int, cell_h: int, cell_w: int, margin: int) -> tuple[int, int]:
    """(height, width) of an n-row, three-column grid."""
    return n * cell_h + (n + 1) * margin, 3 * cell_w + 4 * margin


def emit_sample_grid(d_orig: Dataset, topk_ids, d_syn: Dataset, provenance, n: int,
                     path=None, margin: int = 2) -> np.ndarray:
    """Rows of (original, top-K content, generated) matched by provenance.

    Returns the uint8 grid and writes it as PNG when ``path`` is given.
    """
    if n < 1 or n > len(d_syn):
        raise ReportError(f"need 1 <= n <= {len(d_syn)} synthetic samples, got {n}")
    by_id = {int(p["sample_id"]): p for p in provenance}
    topk = set(int(t) for t in topk_ids)
    h, w, c = d_orig.images.shape[1:]
    height, width = grid_size(n, h, w, margin)
    canvas = np.full((height, width, 3), 255, np.uint8)
    for row in range(n):
        sid = int(d_syn.sample_ids[row])
        prov = by_id.get(sid)
        if prov is None:
            raise ReportError(f"synthetic sample {sid} has no provenance record")
        if int(prov["content_id"]) not in topk:
            raise ReportError(f"content {prov['content_id']} of sample {sid} is not a top-K sample")
        try:
            o_idx, c_idx = d_orig.index_of([prov["original_id"], prov["content_id"]])
        except Exception as exc:
            raise ReportError(f"provenance of sample {sid} points outside the dataset: {exc}") from None
        cells = (d_orig.images[o_idx], d_orig.images[c_idx], d_syn.images[row])
        y = margin + row * (h + margin)
        for col, img in enumerate(cells):
            x = margin + col * (w + margin)
            canvas[y:y + h, x:x + w] = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)[..., :3]
    if path is not None:
        Image.fromarray(canvas).save(path)
    return canvas


def report_run(run_dir, out_dir, grid_rows: int = 8, margin: int = 2) -> dict:
    """Table over every ``metrics.json`` below ``run_dir`` plus one grid per run."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    metric_files = sorted(run_dir.rglob("metrics.json"))
    metric_files = [p for p in metric_files if (p.parent / "record.json").is_file()]
    if not metric_files:
        raise ReportError(f"no completed runs (record.json + metrics.json) under {run_dir}")
    rows = []
    grids = []
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, mf in enumerate(metric_files):
        rows.extend(rows_from_metrics(json.loads(mf.read_text())))
        record = json.loads((mf.parent / "record.json").read_text())
        inject_dir = Path(record["stages"]["inject"]["path"])
        data_dir = Path(record["stages"]["gen-data"]["path"])
        topk_dir = Path(record["stages"]["extract-topk"]["path"])
        d_orig = load_dataset(data_dir / "train")
        d_syn = load_dataset(inject_dir / "syn")
        if len(d_syn) == 0:
            continue
        topk = LossRanking.from_lines((topk_dir / "ranking.csv").read_text()).sample_ids
        provenance = read_provenance(inject_dir / "provenance.csv")
        name = f"grid-{i:02d}-seed{json.loads(mf.read_text())['seed']}.png"
        emit_sample_grid(d_orig, topk, d_syn, provenance, min(grid_rows, len(d_syn)),
                         out_dir / name, margin)
        grids.append(name)
    emit_table(rows, out_dir)
    return {"rows": len(rows), "grids": grids}
