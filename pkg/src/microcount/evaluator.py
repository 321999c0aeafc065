"""Counting metrics, timed inference and results tables."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import REPORTED
from .tensor import Tensor, no_grad

CSV_FIELDS = ("model", "variant", "dataset", "mae", "rmse", "flops", "params", "ms_per_image", "seed")
GROUPS = (("traditional", "Traditional backbones"), ("state-of-the-art", "State of the art"),
          ("vit", "ViT backbones"), ("other", "Other"))


class EvaluationError(RuntimeError):
    pass


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or p.size != t.size:
        raise ValueError(f"need equal non-empty lengths, got {p.size} and {t.size}")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def predict(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Raw real-valued counts for an (N, 3, S, S) array, in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(model(Tensor(images[i:i + batch_size])).data.astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class EvalResult:
    model: str
    variant: str
    dataset: str
    mae: float
    rmse: float
    flops: float
    params: int
    ms_per_image: float
    seed: int | str
    mae_rounded: float | None = None
    skipped: list = field(default_factory=list)

    def row(self, rounded: bool = False) -> dict:
        r = {k: getattr(self, k) for k in CSV_FIELDS}
        if rounded:
            r["mae_rounded"] = self.mae_rounded
        return r


def evaluate(model, images: np.ndarray, counts: np.ndarray, batch_size: int = 32, name: str = "model",
             variant: str = "", dataset: str = "", seed=0, skipped=()) -> EvalResult:
    """MAE/RMSE of ``model`` on preprocessed ``images`` with labels ``counts``,
    mean wall time per image, and the analytic FLOPs of one forward pass."""
    if len(images) == 0:
        raise EvaluationError(f"nothing to evaluate ({len(skipped)} records skipped)")
    start = time.perf_counter()
    pred = predict(model, images, batch_size)
    elapsed = time.perf_counter() - start
    flops = float(model.flops((1,) + tuple(images.shape[1:]))[0])
    params = int(sum(p.size for p in model.parameters()))
    return EvalResult(name, variant, dataset, mae(pred, counts), rmse(pred, counts), flops, params,
                      1000.0 * elapsed / len(images), seed, mae(np.rint(pred), counts), list(skipped))


def aggregate(results: list) -> list:
    """One mean row per (model, variant, dataset) across seeds."""
    groups = {}
    for r in results:
        groups.setdefault((r.model, r.variant, r.dataset), []).append(r)
    out = []
    for (m, v, d), rs in groups.items():
        def mean(key, rs=rs):
            return float(np.mean([getattr(r, key) for r in rs]))
        out.append(EvalResult(m, v, d, mean("mae"), mean("rmse"), mean("flops"), rs[0].params,
                              mean("ms_per_image"), "mean" if len(rs) > 1 else rs[0].seed))
    return out


# -- files ---------------------------------------------------------------------

def write_csv(path, results: list, rounded: bool = False) -> Path:
    path = Path(path)
    cols = list(CSV_FIELDS) + (["mae_rounded"] if rounded else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in results:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row(rounded).items()})
    return path


def read_csv(path) -> list:
    def seed(v):
        try:
            return int(v)
        except ValueError:
            return v

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            extra = {"mae_rounded": float(row["mae_rounded"])} if row.get("mae_rounded") else {}
            out.append(EvalResult(row["model"], row["variant"], row["dataset"], float(row["mae"]),
                                  float(row["rmse"]), float(row["flops"]), int(row["params"]),
                                  float(row["ms_per_image"]), seed(row["seed"]), **extra))
    return out


def _marks(values: list) -> list:
    """'best' / 'second' / '' per value (lower is better, ties to the earlier row)."""
    finite = [(v, i) for i, v in enumerate(values) if v is not None and math.isfinite(v)]
    order = [i for _, i in sorted(finite)]
    marks = [""] * len(values)
    if order:
        marks[order[0]] = "best"
    if len(order) > 1:
        marks[order[1]] = "second"
    return marks


def _fmt(v, mark, digits=2):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "-"
    s = f"{v:.{digits}f}" if isinstance(v, float) else str(v)
    return f"**{s}**" if mark == "best" else f"<u>{s}</u>" if mark == "second" else s


def markdown_table(results: list) -> str:
    """Models as rows grouped into the three result blocks; MAE and RMSE per
    dataset, then FLOPs (1e8) and parameters (1e6). Best per column in bold,
    second best underlined."""
    rows = aggregate(results)
    datasets = list(dict.fromkeys(r.dataset for r in rows))
    models = list(dict.fromkeys((r.model, r.variant) for r in rows))
    rank = {g: i for i, (g, _) in enumerate(GROUPS)}

    def group(model):
        return REPORTED[model][1] if model in REPORTED else "other"

    models.sort(key=lambda mv: rank[group(mv[0])])
    cell = {(r.model, r.variant, r.dataset): r for r in rows}
    columns = []
    for d in datasets:
        for metric in ("mae", "rmse"):
            columns.append((f"{d} {metric.upper()}", [getattr(cell[(m, v, d)], metric) if (m, v, d) in cell
                                                      else None for m, v in models]))
    first = [next(r for r in rows if (r.model, r.variant) == mv) for mv in models]
    columns.append(("FLOPs (1e8)", [r.flops / 1e8 for r in first]))
    columns.append(("Params (1e6)", [r.params / 1e6 for r in first]))
    marks = [_marks(vals) for _, vals in columns]
    lines = ["| Model | " + " | ".join(c for c, _ in columns) + " |",
             "|---|" + "---:|" * len(columns)]
    current = None
    for i, (m, v) in enumerate(models):
        g = group(m)
        if g != current:
            current = g
            lines.append(f"| *{dict(GROUPS)[g]}* |" + " |" * len(columns))
        label = REPORTED[m][0] if m in REPORTED else m
        if v:
            label += f" ({v})"
        cells = [_fmt(col[i], marks[j][i]) for j, (_, col) in enumerate(columns)]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_report(results: list, out_dir, rounded: bool = False) -> dict:
    """Write results.csv (per-seed rows plus mean rows when seeds repeat) and results.md."""
    if not results:
        raise EvaluationError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(results)
    if any(len([r for r in results if (r.model, r.variant, r.dataset) == k]) > 1
           for k in {(r.model, r.variant, r.dataset) for r in results}):
        rows += [a for a in aggregate(results) if a.seed == "mean"]
    csv_path = write_csv(out / "results.csv", rows, rounded)
    md_path = out / "results.md"
    md_path.write_text(markdown_table(results))
    return {"csv": csv_path, "markdown": md_path}


__all__ = ["CSV_FIELDS", "EvalResult", "EvaluationError", "aggregate", "emit_report", "evaluate", "mae",
           "markdown_table", "predict", "read_csv", "rmse", "write_csv"]
