"""Overlap metrics and per-video / dataset aggregation."""
from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractViolation, InputError

REPORT_SCHEMA_VERSION = 1


def _pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred), np.asarray(gt)
    if a.shape != b.shape:
        raise ContractViolation(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a.astype(bool), b.astype(bool)


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = _pair(pred, gt)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    a, b = _pair(pred, gt)
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ContractViolation("threshold must lie in (0, 1)")
    return (np.asarray(prob) > threshold).astype(np.uint8)


@dataclass
class VideoScore:
    name: str
    iou: list[float]
    dice: list[float]

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou))

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))


@dataclass
class EvalReport:
    videos: list[VideoScore]
    config: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    traces: dict[str, list[dict[str, Any]]] = field(default_factory=dict)

    @property
    def mean_iou(self) -> float:
        return float(np.mean([v.mean_iou for v in self.videos])) if self.videos else float("nan")

    @property
    def mean_dice(self) -> float:
        return float(np.mean([v.mean_dice for v in self.videos])) if self.videos else float("nan")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "dataset": {"mean_iou": self.mean_iou, "mean_dice": self.mean_dice,
                        "num_videos": len(self.videos)},
            "videos": [
                {"name": v.name, "mean_iou": v.mean_iou, "mean_dice": v.mean_dice,
                 "iou": v.iou, "dice": v.dice}
                for v in self.videos
            ],
            "config": self.config,
            "config_fingerprint": config_fingerprint(self.config),
            "warnings": self.warnings,
        }

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(out_dir / "per_frame.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["video", "frame_index", "iou", "dice"])
            for v in self.videos:
                for k, (a, b) in enumerate(zip(v.iou, v.dice)):
                    wr.writerow([v.name, k + 2, f"{a:.10g}", f"{b:.10g}"])
        for name, rows in self.traces.items():
            write_trace_csv(out_dir / f"trace_{name}.csv", rows)


def config_fingerprint(config: dict[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


TRACE_COLUMNS = ["frame_index", "delta", "adapted", "first_frame_loss", "iou", "dice",
                 "fg_count", "bg_count", "ignore_count"]


def write_trace_csv(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in TRACE_COLUMNS])


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def evaluate_run(
    predictions: dict[str, Sequence[np.ndarray]],
    ground_truth: dict[str, Sequence[np.ndarray]],
    traces: dict[str, list[dict[str, Any]]] | None = None,
    config: dict[str, Any] | None = None,
    threshold: float = 0.5,
) -> EvalReport:
    """Score predicted frames 2..T of each video against its ground truth.

    ``predictions[name]`` may hold probability maps or binary masks;
    ``ground_truth[name]`` holds the masks of frames 2..T in the same order.
    """
    if set(predictions) != set(ground_truth):
        raise InputError("predictions and ground truth cover different videos")
    videos, warnings = [], []
    for name in predictions:
        preds, gts = list(predictions[name]), list(ground_truth[name])
        if len(preds) != len(gts):
            raise InputError(f"{name}: {len(preds)} predictions for {len(gts)} ground-truth frames")
        if not preds:
            warnings.append(f"{name}: no frames after the first; video excluded")
            continue
        bins = [binarize(p, threshold) if np.asarray(p).dtype.kind == "f" else np.asarray(p) for p in preds]
        videos.append(VideoScore(
            name,
            [iou(p, g) for p, g in zip(bins, gts)],
            [dice(p, g) for p, g in zip(bins, gts)],
        ))
    return EvalReport(videos, dict(config or {}), warnings, dict(traces or {}))
