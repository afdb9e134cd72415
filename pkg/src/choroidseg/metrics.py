"""Segmentation quality metrics: region overlap, lower-boundary surface error,
and the gap to a fully supervised reference model.

All kernels operate on binary numpy masks at their native resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np


def iou(pred: np.ndarray, ref: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Defined as 1.0 when both masks are empty (nothing to find, nothing found).
    """
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    p = pred.astype(bool)
    r = ref.astype(bool)
    union = np.logical_or(p, r).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, r).sum() / union)


def lower_boundary(mask: np.ndarray) -> np.ndarray:
    """Per-column row index of the lowest band pixel; NaN where the column is empty."""
    mask = np.asarray(mask).astype(bool)
    height = mask.shape[0]
    any_col = mask.any(axis=0)
    # highest row index with a set pixel: flip rows so argmax finds the last one
    last = height - 1 - np.argmax(mask[::-1, :], axis=0)
    out = np.where(any_col, last.astype(float), np.nan)
    return out


def boundary_errors(pred: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-column unsigned boundary errors plus the count of skipped columns.

    Columns where both boundaries exist contribute |z_pred - z_ref|; columns
    where exactly one exists are penalized with the image height; columns where
    both are absent are skipped (not counted).
    """
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    height = pred.shape[0]
    z_pred = lower_boundary(pred)
    z_ref = lower_boundary(ref)
    has_pred = ~np.isnan(z_pred)
    has_ref = ~np.isnan(z_ref)
    both = has_pred & has_ref
    one = has_pred ^ has_ref
    errors = np.concatenate([
        np.abs(z_pred[both] - z_ref[both]),
        np.full(int(one.sum()), float(height)),
    ])
    skipped = int((~has_pred & ~has_ref).sum())
    return errors, skipped


def ausde(pred: np.ndarray, ref: np.ndarray) -> float:
    """Average unsigned surface detection error on the lower band boundary, in pixels."""
    errors, _ = boundary_errors(pred, ref)
    if errors.size == 0:
        return 0.0
    return float(errors.mean())


def gap(model_value: float, oracle_value: float) -> float:
    """Absolute metric difference between a model and the supervised reference."""
    return abs(model_value - oracle_value)


@dataclass
class PerImageMetrics:
    id: str
    iou: float
    ausde: float


@dataclass
class MetricReport:
    """Aggregate and per-image metrics for one evaluation pass."""

    iou: float
    ausde: float
    per_image: list[PerImageMetrics] = field(default_factory=list)
    gap_iou: Optional[float] = None
    gap_ausde: Optional[float] = None
    n_images: int = 0
    columns_skipped: int = 0

    def with_gap(self, oracle: "MetricReport") -> "MetricReport":
        return MetricReport(
            iou=self.iou,
            ausde=self.ausde,
            per_image=list(self.per_image),
            gap_iou=gap(self.iou, oracle.iou),
            gap_ausde=gap(self.ausde, oracle.ausde),
            n_images=self.n_images,
            columns_skipped=self.columns_skipped,
        )

    def to_dict(self) -> dict:
        data = {
            "iou": self.iou,
            "ausde": self.ausde,
            "n_images": self.n_images,
            "columns_skipped": self.columns_skipped,
            "per_image": [
                {"id": p.id, "iou": p.iou, "ausde": p.ausde} for p in self.per_image
            ],
        }
        if self.gap_iou is not None:
            data["gap_iou"] = self.gap_iou
        if self.gap_ausde is not None:
            data["gap_ausde"] = self.gap_ausde
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            iou=float(data["iou"]),
            ausde=float(data["ausde"]),
            per_image=[
                PerImageMetrics(id=p["id"], iou=float(p["iou"]), ausde=float(p["ausde"]))
                for p in data.get("per_image", [])
            ],
            gap_iou=float(data["gap_iou"]) if "gap_iou" in data else None,
            gap_ausde=float(data["gap_ausde"]) if "gap_ausde" in data else None,
            n_images=int(data.get("n_images", 0)),
            columns_skipped=int(data.get("columns_skipped", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_report(
    pairs: Iterable[tuple[str, np.ndarray, np.ndarray]],
    oracle: Optional[MetricReport] = None,
) -> MetricReport:
    """Aggregate metrics over (id, predicted mask, reference mask) pairs.

    Aggregate IOU/AUSDE are means of the per-image values; gap columns appear
    only when an oracle report is supplied.
    """
    per_image = []
    skipped_total = 0
    for sample_id, pred, ref in pairs:
        errors, skipped = boundary_errors(pred, ref)
        value = float(errors.mean()) if errors.size else 0.0
        per_image.append(PerImageMetrics(id=sample_id, iou=iou(pred, ref), ausde=value))
        skipped_total += skipped
    if not per_image:
        raise ValueError("compute_report needs at least one mask pair")
    report = MetricReport(
        iou=float(np.mean([p.iou for p in per_image])),
        ausde=float(np.mean([p.ausde for p in per_image])),
        per_image=per_image,
        n_images=len(per_image),
        columns_skipped=skipped_total,
    )
    if oracle is not None:
        report = report.with_gap(oracle)
    return report
