"""Per-pair errors, per-scene medians and the evaluation report files."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relpose.data import PairRecord
from relpose.errors import EmptyInput, NearZeroQuaternion
from relpose.geometry import SceneErrorSummary, align_scale, per_scene_median, rotation_error_deg, translation_error
from relpose.report import emit_distribution


@dataclass
class PairError:
    scene: str
    pair_id: str
    rotation_deg: float
    translation_m: float


@dataclass
class EvalReport:
    pairs: list[PairError]
    scenes: list[SceneErrorSummary]
    average_rotation_deg: float
    average_translation_m: float
    skipped: int = 0
    scales: dict[str, float] = field(default_factory=dict)
    pooled: bool = False


def evaluate(records: list[PairRecord], predictions, scale_align: bool = False, scale_mode: str = "lsq",
             pooled: bool = False) -> EvalReport:
    """Score ``predictions`` (one ``(q_hat, t_hat)`` per record).

    With ``scale_align`` the predicted translations of each scene are
    rescaled by the factor from :func:`align_scale` before measuring.
    The averages are means of the per-scene medians, or medians over all
    pairs when ``pooled``.
    """
    if len(records) != len(predictions):
        raise ValueError(f"{len(records)} records but {len(predictions)} predictions")
    by_scene: OrderedDict[str, list[int]] = OrderedDict()
    skipped = 0
    valid = []
    for i, (rec, (q_hat, _)) in enumerate(zip(records, predictions)):
        if not np.linalg.norm(q_hat) > 1e-12:
            skipped += 1
            continue
        valid.append(i)
        by_scene.setdefault(rec.scene, []).append(i)
    if not valid:
        raise EmptyInput("no scorable predictions")

    scales: dict[str, float] = {}
    t_pred = {i: np.asarray(predictions[i][1], dtype=np.float64) for i in valid}
    if scale_align:
        for scene, idx in by_scene.items():
            s, _ = align_scale([t_pred[i] for i in idx], [records[i].target.translation for i in idx], mode=scale_mode)
            scales[scene] = s
            for i in idx:
                t_pred[i] = s * t_pred[i]

    pairs = []
    for scene, idx in by_scene.items():
        for i in idx:
            rec = records[i]
            try:
                r_err = rotation_error_deg(np.asarray(rec.target.rotation), predictions[i][0])
            except NearZeroQuaternion:  # pragma: no cover - filtered above
                continue
            pairs.append(PairError(scene, rec.pair_id, r_err, translation_error(rec.target.translation, t_pred[i])))
    scenes = per_scene_median((p.scene, p.rotation_deg, p.translation_m) for p in pairs)
    if pooled:
        avg_r = float(np.median([p.rotation_deg for p in pairs]))
        avg_t = float(np.median([p.translation_m for p in pairs]))
    else:
        avg_r = float(np.mean([s.median_rotation_deg for s in scenes]))
        avg_t = float(np.mean([s.median_translation_m for s in scenes]))
    return EvalReport(pairs, scenes, avg_r, avg_t, skipped, scales, pooled)


def write_report(out_dir, report: EvalReport, bin_width_deg: float = 1.0, bin_width_m: float = 0.05,
                 cutoff_deg: float | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pairs.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "pair_id", "rotation_deg", "translation_m"])
        for p in report.pairs:
            w.writerow([p.scene, p.pair_id, repr(p.rotation_deg), repr(p.translation_m)])
    with open(out / "scenes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene", "median_rotation_deg", "median_translation_m", "pair_count", "scale"])
        for s in report.scenes:
            scale = repr(report.scales[s.scene]) if s.scene in report.scales else ""
            w.writerow([s.scene, repr(s.median_rotation_deg), repr(s.median_translation_m), s.pair_count, scale])
        w.writerow(["Average", repr(report.average_rotation_deg), repr(report.average_translation_m),
                    sum(s.pair_count for s in report.scenes), ""])
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "value"])
        w.writerow(["pairs", len(report.pairs)])
        w.writerow(["skipped", report.skipped])
        w.writerow(["average_rotation_deg", repr(report.average_rotation_deg)])
        w.writerow(["average_translation_m", repr(report.average_translation_m)])
        w.writerow(["average_mode", "pooled" if report.pooled else "mean_of_scene_medians"])
    emit_distribution(out, "rotation", [p.rotation_deg for p in report.pairs], "degrees", bin_width_deg, cutoff_deg)
    emit_distribution(out, "translation", [p.translation_m for p in report.pairs], "meters", bin_width_m)
    return out


def write_predictions(path, records: list[PairRecord], predictions) -> None:
    """Relative-pose record lines: ``scene pair_id qw qx qy qz tx ty tz``."""
    with open(path, "w") as f:
        for rec, (q, t) in zip(records, predictions):
            vals = " ".join(repr(float(v)) for v in (*q, *t))
            f.write(f"{rec.scene} {rec.pair_id} {vals}\n")
