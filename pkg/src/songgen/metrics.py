"""Objective metric harness for symbolic and frame-level outputs.

Implements key accuracy (KA), average pitch difference (APD), temporal
duration difference (TD), pitch/duration distribution similarity (PD/DD),
DTW melody distance (MD), and F0 frame error (FFE), with corpus-level
aggregation and exclusion bookkeeping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import DegenerateProfile, InvalidInput
from .keyprompt import key_accuracy
from .melody import MidiSequence, average_pitch, expand, round_to_grid

METRIC_COLUMNS = ["KA", "APD", "TD", "PD", "DD", "MD", "FFE"]

MAX_DURATION_FRAMES = 1500
_LINEAR_DUR_BINS = 32
_LOG_DUR_BINS = 16


def apd(gt: MidiSequence, pred: MidiSequence) -> float:
    """Absolute difference of duration-weighted average pitches, semitones."""
    return abs(average_pitch(gt) - average_pitch(pred))


def td(gt: MidiSequence, pred: MidiSequence) -> float:
    """Absolute difference of total durations, seconds."""
    return abs(gt.total_seconds - pred.total_seconds)


def _duration_bin_edges() -> np.ndarray:
    linear = np.arange(1, _LINEAR_DUR_BINS + 2, dtype=float)  # unit bins 1..32
    log = np.geomspace(_LINEAR_DUR_BINS + 1, MAX_DURATION_FRAMES + 1, _LOG_DUR_BINS + 1)[1:]
    return np.concatenate([linear, log])


def _histogram(values: Sequence[float], edges: np.ndarray) -> np.ndarray:
    h, _ = np.histogram(np.clip(values, edges[0], edges[-1] - 1e-9), bins=edges)
    total = h.sum()
    return h / total if total else h.astype(float)


def distribution_similarity(gt: MidiSequence, pred: MidiSequence, attr: str) -> float:
    """Histogram intersection of note attributes, in percent (PD / DD)."""
    if attr == "pitch":
        edges = np.arange(32, 82, dtype=float)  # one bin per semitone 32..80
        gt_vals = [n.pitch for n in gt.notes]
        pred_vals = [n.pitch for n in pred.notes]
    elif attr == "duration":
        edges = _duration_bin_edges()
        gt_vals = [n.duration for n in gt.notes]
        pred_vals = [n.duration for n in pred.notes]
    else:
        raise InvalidInput(f"unknown attribute {attr!r}")
    return 100.0 * float(np.minimum(_histogram(gt_vals, edges), _histogram(pred_vals, edges)).sum())


def melody_distance(gt: MidiSequence, pred: MidiSequence) -> float:
    """DTW over expanded pitch sequences with |p1 - p2| cost.

    Steps are (1,0), (0,1), (1,1); the accumulated cost is normalized by the
    length of the optimal warping path.
    """
    a = np.array(expand(gt).pitches, dtype=float)
    b = np.array(expand(pred).pitches, dtype=float)
    n, m = len(a), len(b)
    inf = np.inf
    cost = np.full((n + 1, m + 1), inf)
    steps = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = abs(a[i - 1] - b[j - 1])
            best = cost[i - 1, j - 1]
            step = steps[i - 1, j - 1]
            if cost[i - 1, j] < best:
                best, step = cost[i - 1, j], steps[i - 1, j]
            if cost[i, j - 1] < best:
                best, step = cost[i, j - 1], steps[i, j - 1]
            cost[i, j] = best + c
            steps[i, j] = step + 1
    return float(cost[n, m] / steps[n, m])


def ffe(
    gt_f0: Sequence[float],
    gt_voicing: Sequence[bool],
    pred_f0: Sequence[float],
    pred_voicing: Sequence[bool],
    rel_threshold: float = 0.2,
) -> float:
    """F0 frame error: voicing mismatch, or both voiced with >20% pitch error."""
    gt_f0 = np.asarray(gt_f0, dtype=float)
    pred_f0 = np.asarray(pred_f0, dtype=float)
    gt_v = np.asarray(gt_voicing, dtype=bool)
    pred_v = np.asarray(pred_voicing, dtype=bool)
    if not (len(gt_f0) == len(gt_v) == len(pred_f0) == len(pred_v)):
        raise InvalidInput("FFE inputs must all have the same length")
    if len(gt_f0) == 0:
        raise InvalidInput("FFE needs at least one frame")
    mismatch = gt_v != pred_v
    both = gt_v & pred_v
    pitch_err = np.zeros(len(gt_f0), dtype=bool)
    pitch_err[both] = np.abs(pred_f0[both] - gt_f0[both]) > rel_threshold * gt_f0[both]
    return float((mismatch | pitch_err).mean())


class CorpusScorer(Protocol):
    """Interface for embedding-model scores (FAD, KL, CLAP) left to external tools."""

    def score(self, gt_paths: Sequence[str], pred_paths: Sequence[str]) -> dict[str, float]: ...


class NullScorer:
    """No-op stand-in for scorers that need pretrained embedding models."""

    def score(self, gt_paths, pred_paths):
        return {}


@dataclass
class SamplePair:
    gt: MidiSequence
    pred: MidiSequence
    gt_key: Optional[tuple[int, str]] = None  # (tonic, mode)
    tempo_bpm: float = 120.0
    gt_f0: Optional[np.ndarray] = None
    gt_voicing: Optional[np.ndarray] = None
    pred_f0: Optional[np.ndarray] = None
    pred_voicing: Optional[np.ndarray] = None


@dataclass
class MetricReport:
    per_sample: list[dict[str, float]]
    aggregates: dict[str, float]
    excluded: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"aggregates": self.aggregates, "excluded": self.excluded, "per_sample": self.per_sample},
            indent=2,
        )

    def to_table(self) -> str:
        cols = [c for c in METRIC_COLUMNS if c in self.aggregates]
        header = " | ".join(f"{c:>8}" for c in cols)
        row = " | ".join(f"{self.aggregates[c]:8.3f}" for c in cols)
        lines = [header, "-" * len(header), row]
        if self.excluded:
            lines.append(f"excluded: {self.excluded}")
        return "\n".join(lines)


def evaluate_pair(pair: SamplePair, rounded: bool = False) -> dict[str, float]:
    gt, pred = pair.gt, pair.pred
    out: dict[str, float] = {}
    if pair.gt_key is not None:
        try:
            out["KA"] = key_accuracy(gt, pred, pair.gt_key)
        except DegenerateProfile:
            pass  # KA undefined for this sample; recorded by the caller
    out["APD"] = apd(gt, pred)
    out["TD"] = td(gt, pred)
    if rounded:
        gt = round_to_grid(gt, pair.tempo_bpm)
        pred = round_to_grid(pred, pair.tempo_bpm)
    out["PD"] = distribution_similarity(gt, pred, "pitch")
    out["DD"] = distribution_similarity(gt, pred, "duration")
    out["MD"] = melody_distance(gt, pred)
    if pair.gt_f0 is not None and pair.pred_f0 is not None:
        out["FFE"] = ffe(pair.gt_f0, pair.gt_voicing, pair.pred_f0, pair.pred_voicing)
    return out


def evaluate_corpus(pairs: Sequence[SamplePair], rounded: bool = False) -> MetricReport:
    """Per-sample metrics plus means; samples with undefined KA are excluded
    from the KA aggregate only."""
    if not pairs:
        raise InvalidInput("need at least one sample pair")
    per_sample = []
    ka_excluded = 0
    for pair in pairs:
        values = evaluate_pair(pair, rounded=rounded)
        if pair.gt_key is not None and "KA" not in values:
            ka_excluded += 1
        per_sample.append(values)
    aggregates = {}
    for col in METRIC_COLUMNS:
        vals = [s[col] for s in per_sample if col in s]
        if vals:
            aggregates[col] = float(np.mean(vals))
    return MetricReport(per_sample, aggregates, {"KA_undefined": ka_excluded})
