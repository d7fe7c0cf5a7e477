"""Equal error rate, score files and result-table arithmetic."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LABELS = ("bonafide", "spoof")


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.utt_id}")


@dataclass(frozen=True)
class ScoreSet:
    records: tuple[ScoreRecord, ...]

    def scores(self, label: str) -> np.ndarray:
        return np.array([r.score for r in self.records if r.label == label], dtype=np.float64)


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    n_bonafide: int
    n_spoof: int


def eer_from_arrays(bonafide, spoof) -> EerResult:
    """EER where FAR(t) = P(spoof >= t) and FRR(t) = P(bonafide < t).

    Both rates are evaluated on every distinct score, every midpoint between
    neighbouring scores, and one point beyond each end; the EER is where
    their piecewise-linear interpolants in t cross. If they coincide over a
    run of grid points, the threshold reported is the middle of that run.
    """
    bona = np.sort(np.asarray(bonafide, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    nb, ns = len(bona), len(spoof)
    if nb == 0 or ns == 0:
        raise ValueError("EER needs at least one bonafide and one spoof score")
    u = np.unique(np.concatenate([bona, spoof]))
    span = max(u[-1] - u[0], 1.0)
    grid = np.empty(2 * len(u) + 1)
    grid[0] = u[0] - span
    grid[1::2] = u
    grid[2:-1:2] = 0.5 * (u[:-1] + u[1:])
    grid[-1] = u[-1] + span
    n_fa = ns - np.searchsorted(spoof, grid, side="left")  # spoof >= t
    n_fr = np.searchsorted(bona, grid, side="left")  # bonafide < t
    # sign of FAR - FRR in exact integer arithmetic
    diff = n_fa.astype(np.int64) * nb - n_fr.astype(np.int64) * ns
    far = n_fa / ns
    frr = n_fr / nb
    i = int(np.argmax(diff <= 0))  # diff is non-increasing and ends <= 0
    if diff[i] == 0:
        j = i
        while j + 1 < len(grid) and diff[j + 1] == 0:
            j += 1
        return EerResult(float(far[i]), float(0.5 * (grid[i] + grid[j])), nb, ns)
    d0, d1 = diff[i - 1] / (nb * ns), diff[i] / (nb * ns)
    t = d0 / (d0 - d1)
    eer = far[i - 1] + t * (far[i] - far[i - 1])
    thr = grid[i - 1] + t * (grid[i] - grid[i - 1])
    return EerResult(float(eer), float(thr), nb, ns)


def compute_eer(scores: ScoreSet) -> EerResult:
    return eer_from_arrays(scores.scores("bonafide"), scores.scores("spoof"))


def write_scores(scores: ScoreSet, path) -> None:
    with open(path, "w", newline="") as fh:
        for r in scores.records:
            fh.write(f"{r.utt_id}\t{r.label}\t{r.score:.9g}\n")


def read_scores(path) -> ScoreSet:
    """Parse ``utt_id<TAB>label<TAB>score`` lines."""
    path = Path(path)
    records, seen = [], set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            utt, label, raw = row
            if label not in LABELS:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}")
            try:
                value = float(raw)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric score {raw!r}") from None
            if utt in seen:
                raise ValueError(f"{path}:{lineno}: duplicate utterance id {utt!r}")
            seen.add(utt)
            records.append(ScoreRecord(utt, label, value))
    labels = {r.label for r in records}
    if labels != set(LABELS):
        raise ValueError(f"{path}: score file must contain both bonafide and spoof records")
    return ScoreSet(tuple(records))


def seed_average(results) -> float:
    values = [r.eer if isinstance(r, EerResult) else float(r) for r in results]
    if not values:
        raise ValueError("no results to average")
    return sum(values) / len(values)


def relative_reduction(baseline_eer: float, system_eer: float) -> float:
    if baseline_eer <= 0:
        raise ValueError("baseline EER must be positive")
    return (baseline_eer - system_eer) / baseline_eer
