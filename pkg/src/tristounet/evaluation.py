"""Same/different trials with EER, and speaker change detection with purity/coverage.

Scores follow a distance convention for every scorer: a trial is accepted as
"same speaker" when its score is at most the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import VARIANCE_FLOOR, bic_from_moments
from .corpus import Annotation, FeatureSequence, Segment
from .nn import TristouNetParams, embed_many


# --- scorers ------------------------------------------------------------------------

class EmbeddingScorer:
    """Euclidean distance between TristouNet embeddings."""

    name = "embedding"

    def __init__(self, params: TristouNetParams, batch_size: int = 256):
        self.params = params
        self.batch_size = batch_size

    def represent(self, sequences: np.ndarray) -> np.ndarray:
        return embed_many(self.params, sequences, self.batch_size)

    def pair_scores(self, rep, i, j) -> np.ndarray:
        return np.sqrt(np.sum((rep[i] - rep[j]) ** 2, axis=-1))


class DivergenceScorer:
    """Gaussian divergence between diagonal Gaussians fitted to each sequence."""

    name = "divergence"

    def represent(self, sequences: np.ndarray):
        sequences = np.asarray(sequences, dtype=np.float64)
        means = sequences.mean(axis=1)
        var = np.maximum(((sequences - means[:, None]) ** 2).mean(axis=1), VARIANCE_FLOOR)
        return means, np.sqrt(var)

    def pair_scores(self, rep, i, j) -> np.ndarray:
        means, stds = rep
        return np.sum((means[i] - means[j]) ** 2 / (stds[i] * stds[j]), axis=-1)


class BicScorer:
    """Delta-BIC with full covariances and penalty weight ``penalty_weight``."""

    name = "bic"
    chunk = 4096

    def __init__(self, penalty_weight: float = 1.0):
        self.penalty_weight = penalty_weight

    def represent(self, sequences: np.ndarray):
        sequences = np.asarray(sequences, dtype=np.float64)
        count = sequences.shape[1]
        means = sequences.mean(axis=1)
        centered = sequences - means[:, None]
        covs = np.einsum("ntf,ntg->nfg", centered, centered) / count
        return np.full(len(sequences), count, dtype=np.float64), means, covs

    def pair_scores(self, rep, i, j) -> np.ndarray:
        counts, means, covs = rep
        return bic_from_moments(counts[i], means[i], covs[i], counts[j], means[j], covs[j], self.penalty_weight)


SCORERS = {"embedding": EmbeddingScorer, "divergence": DivergenceScorer, "bic": BicScorer}


# --- same/different trials ------------------------------------------------------------

@dataclass
class TrialSet:
    scores: np.ndarray
    labels: np.ndarray  # True for same-speaker trials

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.labels.all() or not self.labels.any():
            raise ValueError("trials need at least one same and one different pair")

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class DetCurve:
    thresholds: np.ndarray  # ascending, with -inf and +inf sentinels
    fpr: np.ndarray
    fnr: np.ndarray


def num_trials(num_speakers: int, per_speaker: int) -> int:
    total = num_speakers * per_speaker
    return total * (total - 1) // 2


def build_trials(per_speaker: dict[str, np.ndarray], scorer) -> TrialSet:
    """Score every unordered pair among the sequences of all speakers."""
    chunk = getattr(scorer, "chunk", 200_000)
    if len(per_speaker) < 2:
        raise ValueError("trials need at least two speakers")
    speakers = sorted(per_speaker)
    sequences = np.concatenate([per_speaker[s] for s in speakers])
    labels = np.repeat(np.arange(len(speakers)), [len(per_speaker[s]) for s in speakers])
    rep = scorer.represent(sequences)
    i, j = np.triu_indices(len(sequences), k=1)
    scores = np.concatenate(
        [scorer.pair_scores(rep, i[k:k + chunk], j[k:k + chunk]) for k in range(0, len(i), chunk)]
    )
    return TrialSet(scores, labels[i] == labels[j])


def det_curve(trials: TrialSet) -> DetCurve:
    """FPR/FNR at every distinct score used as threshold, plus both infinities.

    FPR(t) is the share of different-speaker trials scored at most ``t``;
    FNR(t) the share of same-speaker trials scored above ``t``.
    """
    same = np.sort(trials.scores[trials.labels])
    diff = np.sort(trials.scores[~trials.labels])
    thresholds = np.concatenate([[-np.inf], np.unique(trials.scores), [np.inf]])
    fpr = np.searchsorted(diff, thresholds, side="right") / len(diff)
    fnr = 1.0 - np.searchsorted(same, thresholds, side="right") / len(same)
    return DetCurve(thresholds, fpr, fnr)


def eer(curve: DetCurve) -> float:
    """Equal error rate, linearly interpolated where FNR - FPR changes sign."""
    gap = curve.fnr - curve.fpr
    k = int(np.argmax(gap <= 0))  # gap[0] = 1 at -inf, gap[-1] = -1 at +inf
    if gap[k] == 0:
        return float(curve.fpr[k])
    w = gap[k - 1] / (gap[k - 1] - gap[k])
    return float(curve.fpr[k - 1] + w * (curve.fpr[k] - curve.fpr[k - 1]))


# --- speaker change detection -------------------------------------------------------

@dataclass
class DistanceCurve:
    times: np.ndarray
    values: np.ndarray

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


@dataclass
class PurityCoveragePoint:
    threshold: float
    purity: float
    coverage: float
    num_changes: int


def scd_distance_curve(features: FeatureSequence, scorer, window: float = 2.0,
                       step: float = 0.1) -> DistanceCurve:
    """Distance between adjacent left/right windows centered every ``step`` seconds.

    The first center is ``window`` seconds into the file; files shorter than
    two windows give an empty curve.
    """
    width = int(round(window / features.frame_step))
    hop = int(round(step / features.frame_step))
    if width < 1 or hop < 1:
        raise ValueError("window and step must span at least one frame")
    total = len(features)
    if total < 2 * width:
        return DistanceCurve(np.zeros(0), np.zeros(0))
    count = (total - 2 * width) // hop + 1
    centers = width + hop * np.arange(count)
    starts = np.unique(np.concatenate([centers - width, centers]))
    windows = np.lib.stride_tricks.sliding_window_view(features.frames, width, axis=0)[starts]
    rep = scorer.represent(np.ascontiguousarray(np.swapaxes(windows, 1, 2)))
    left = np.searchsorted(starts, centers - width)
    right = np.searchsorted(starts, centers)
    values = scorer.pair_scores(rep, left, right)
    times = features.origin + centers * features.frame_step
    return DistanceCurve(times, np.asarray(values, dtype=np.float64))


def detect_peaks(curve: DistanceCurve, context: float = 1.0, threshold: float = -np.inf) -> list[float]:
    """Times of local maxima within +/- ``context`` seconds that reach ``threshold``.

    A point wins over every other point in its neighbourhood when strictly
    larger than it, or equal to it and earlier.
    """
    times, values = np.asarray(curve.times), np.asarray(curve.values)
    eps = 1e-9
    lo = np.searchsorted(times, times - context - eps, side="left")
    hi = np.searchsorted(times, times + context + eps, side="right")
    changes = []
    for k in range(len(times)):
        if values[k] < threshold:
            continue
        before, after = values[lo[k]:k], values[k + 1:hi[k]]
        if np.all(values[k] > before) and np.all(values[k] >= after):
            changes.append(float(times[k]))
    return changes


def changes_to_segments(changes, extent: Segment) -> list[Segment]:
    bounds = [extent.start, *sorted(changes), extent.end]
    return [Segment(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


def speech_turns(annotation: Annotation, gap: float = 1e-9) -> list[Segment]:
    """Annotation entries with adjacent same-speaker entries merged into maximal turns."""
    turns: list[tuple[Segment, str]] = []
    for segment, speaker in annotation.entries:
        if turns and turns[-1][1] == speaker and segment.start - turns[-1][0].end <= gap:
            turns[-1] = (Segment(turns[-1][0].start, segment.end), speaker)
        else:
            turns.append((segment, speaker))
    return [segment for segment, _ in turns]


def _segments(x) -> list[Segment]:
    return speech_turns(x) if isinstance(x, Annotation) else list(x)


def coverage_terms(reference, hypothesis) -> tuple[float, float]:
    """Numerator and denominator of the coverage ratio, for aggregation over files."""
    ref = _segments(reference)
    hyp = _segments(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    if not hyp:
        return 0.0, float(sum(r.duration for r in ref))
    r_start = np.array([r.start for r in ref])[:, None]
    r_end = np.array([r.end for r in ref])[:, None]
    h_start = np.array([h.start for h in hyp])[None]
    h_end = np.array([h.end for h in hyp])[None]
    overlap = np.maximum(0.0, np.minimum(r_end, h_end) - np.maximum(r_start, h_start))
    return float(overlap.max(axis=1).sum()), float((r_end - r_start).sum())


def coverage(reference, hypothesis) -> float:
    """Share of reference time covered by the single best hypothesis segment of each turn."""
    num, den = coverage_terms(reference, hypothesis)
    return num / den


def purity(reference, hypothesis) -> float:
    """Coverage with reference and hypothesis swapped."""
    if not _segments(hypothesis):
        raise ValueError("empty hypothesis")
    return coverage(hypothesis, reference)


def purity_coverage_curve(reference: Annotation, curve: DistanceCurve, thresholds,
                          context: float = 1.0, extent: Segment | None = None) -> list[PurityCoveragePoint]:
    """One purity/coverage point per threshold (thresholds are sorted ascending)."""
    extent = extent or reference.extent()
    points = []
    for threshold in sorted(thresholds):
        changes = [t for t in detect_peaks(curve, context, threshold) if extent.start < t < extent.end]
        hypothesis = changes_to_segments(changes, extent)
        points.append(PurityCoveragePoint(
            float(threshold), purity(reference, hypothesis), coverage(reference, hypothesis), len(changes)
        ))
    return points


def change_recall(reference: Annotation, changes, tolerance: float = 0.25) -> tuple[int, int]:
    """(number of true speaker changes hit within ``tolerance``, number of true changes)."""
    truth = [
        cur.start for (prev, spk_a), (cur, spk_b) in zip(reference.entries, reference.entries[1:])
        if spk_a != spk_b
    ]
    changes = np.asarray(sorted(changes))
    hits = sum(1 for t in truth if changes.size and np.min(np.abs(changes - t)) <= tolerance + 1e-9)
    return hits, len(truth)
