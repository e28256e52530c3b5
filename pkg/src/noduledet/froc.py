"""Candidate-to-nodule matching, FROC curves and the seven-point FROC score."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UnknownScanError
from .records import Annotation, Candidate

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

TP, FP, IGNORED = "tp", "fp", "ignored"


@dataclass
class MatchResult:
    candidates: list[Candidate]
    outcome: list[str]  # TP / FP / IGNORED per candidate
    matched: list[int]  # annotation index per candidate, -1 for misses
    detected: list[bool]  # per annotation
    n_nodules: int
    n_scans: int
    scan_ids: list[str] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return self.outcome.count(TP)

    @property
    def fp(self) -> int:
        return self.outcome.count(FP)


def match_candidates(
    candidates: Sequence[Candidate],
    annotations: Sequence[Annotation],
    scan_ids: Sequence[str] | None = None,
) -> MatchResult:
    """Classify each candidate as a true positive, false positive or ignored hit.

    A candidate hits a nodule when its distance to the center is strictly
    below the radius; it belongs to its nearest hit.  Per nodule, the
    highest-scored hit (ties: earliest) is the true positive and any further
    hits are ignored.  ``scan_ids`` lists every evaluated scan; by default
    the scans named by ``annotations``.
    """
    scans = list(dict.fromkeys(scan_ids if scan_ids is not None else (a.uid for a in annotations)))
    known = set(scans)
    offenders = sorted({c.uid for c in candidates if c.uid not in known})
    if offenders:
        raise UnknownScanError(f"candidates reference unknown scans: {', '.join(offenders)}")
    stray = sorted({a.uid for a in annotations if a.uid not in known})
    if stray:
        raise UnknownScanError(f"annotations reference scans outside the scan list: {', '.join(stray)}")

    by_scan: dict[str, list[int]] = {}
    for j, a in enumerate(annotations):
        by_scan.setdefault(a.uid, []).append(j)

    matched = [-1] * len(candidates)
    for i, c in enumerate(candidates):
        best, best_d = -1, np.inf
        for j in by_scan.get(c.uid, ()):
            a = annotations[j]
            d = float(np.linalg.norm(np.subtract(c.center, a.center)))
            if d < a.diameter / 2 and d < best_d:
                best, best_d = j, d
        matched[i] = best

    outcome = [FP if m < 0 else IGNORED for m in matched]
    detected = [False] * len(annotations)
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].probability, i))
    for i in order:
        j = matched[i]
        if j >= 0 and not detected[j]:
            detected[j] = True
            outcome[i] = TP
    return MatchResult(list(candidates), outcome, matched, detected, len(annotations), len(scans), scans)


@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fps_per_scan: np.ndarray
    sensitivity: np.ndarray
    n_candidates: int = 0
    n_scans: int = 1

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fps_per_scan.tolist(), self.sensitivity.tolist()))

    @property
    def candidates_per_scan(self) -> float:
        return self.n_candidates / self.n_scans

    @property
    def max_sensitivity(self) -> float:
        return float(self.sensitivity.max()) if len(self.sensitivity) else 0.0


def froc_curve(result: MatchResult) -> FrocCurve:
    """Sweep the threshold down through every distinct candidate score."""
    if result.n_nodules == 0:
        raise ValueError("sensitivity is undefined without annotations")
    if result.n_scans < 1:
        raise ValueError("at least one scan is required")
    scores = np.array([c.probability for c in result.candidates], dtype=np.float64)
    outcome = np.array(result.outcome)
    if len(scores) == 0:
        return FrocCurve(np.array([np.inf]), np.zeros(1), np.zeros(1), 0, result.n_scans)

    thresholds, fps, sens = [], [], []
    seen = set()
    for t in np.unique(scores)[::-1]:
        on = scores >= t
        point = (
            np.count_nonzero(on & (outcome == FP)) / result.n_scans,
            np.count_nonzero(on & (outcome == TP)) / result.n_nodules,
        )
        if point in seen:
            continue
        seen.add(point)
        thresholds.append(t)
        fps.append(point[0])
        sens.append(point[1])
    order = np.lexsort((np.array(sens), np.array(fps)))
    return FrocCurve(
        np.array(thresholds)[order],
        np.array(fps)[order],
        np.array(sens)[order],
        len(scores),
        result.n_scans,
    )


def sensitivity_at(curve: FrocCurve, fps_target: float) -> float:
    """Step readout: the best operating point whose FPs/scan do not exceed the target."""
    if fps_target < 0:
        raise ValueError("FP rate must be non-negative")
    ok = curve.fps_per_scan <= fps_target
    return float(curve.sensitivity[ok].max()) if np.any(ok) else 0.0


def average_froc_score(curve: FrocCurve, rates: Sequence[float] = FP_RATES) -> float:
    return float(np.mean([sensitivity_at(curve, r) for r in rates]))


def fps_at_sensitivity(curve: FrocCurve, target: float) -> float:
    """Fewest FPs/scan at which sensitivity reaches ``target`` (inf if never)."""
    ok = curve.sensitivity >= target
    return float(curve.fps_per_scan[ok].min()) if np.any(ok) else float("inf")


def _g(v: float) -> str:
    return repr(float(v))


def emit_report(systems: Sequence[tuple[str, FrocCurve]], out_dir: str) -> tuple[str, str]:
    """Write ``froc.csv`` and ``summary.csv`` for one or more named systems."""
    if not systems:
        raise ValueError("at least one curve is required")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir!r}: {exc}") from exc

    froc_buf = io.StringIO()
    w = csv.writer(froc_buf, lineterminator="\n")
    w.writerow(["system", "threshold", "fps_per_scan", "sensitivity"])
    for name, curve in systems:
        for t, f, s in zip(curve.thresholds, curve.fps_per_scan, curve.sensitivity):
            w.writerow([name, _g(t), _g(f), _g(s)])

    sum_buf = io.StringIO()
    w = csv.writer(sum_buf, lineterminator="\n")
    w.writerow(
        ["system", "sensitivity", "candidates_per_scan", "average_froc"]
        + [f"sens_at_{r:g}" for r in FP_RATES]
    )
    for name, curve in systems:
        w.writerow(
            [name, _g(curve.max_sensitivity), _g(curve.candidates_per_scan), _g(average_froc_score(curve))]
            + [_g(sensitivity_at(curve, r)) for r in FP_RATES]
        )

    paths = os.path.join(out_dir, "froc.csv"), os.path.join(out_dir, "summary.csv")
    for path, buf in zip(paths, (froc_buf, sum_buf)):
        with open(path, "w", newline="\n") as fh:
            fh.write(buf.getvalue())
    return paths
