"""Triplet loss, hard-negative epoch sampling, RMSProp and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus, CorpusError, sample_fixed_sequences, speaker_sequences
from .nn import TristouNetParams, embed_backward, embed_batch, embed_many, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 50
    per_speaker: int = 40
    batch_size: int = 32
    duration: float = 2.0
    hidden_units: int = 16  # d1
    dense_units: int = 16  # d2
    embedding_dim: int = 16  # d
    rho: float = 0.9
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.per_speaker < 2:
            raise ValueError("per_speaker must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def dims(self, input_dim: int) -> tuple[int, int, int, int]:
        return (input_dim, self.hidden_units, self.dense_units, self.embedding_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    accumulators: dict[str, np.ndarray]
    rho: float = 0.9
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def zeros(cls, params: TristouNetParams, rho: float = 0.9, epsilon: float = 1e-8) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.arrays().items()}, rho, epsilon, 0)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    num_triplets: int
    active_triplets: int
    skipped_pairs: int
    wall_time: float = 0.0


@dataclass
class SequencePool:
    """Equal-length sequences ``(M, T, F)`` with integer speaker labels."""

    sequences: np.ndarray
    labels: np.ndarray
    speakers: list[str] = field(default_factory=list)

    @classmethod
    def from_speakers(cls, per_speaker: dict[str, np.ndarray]) -> "SequencePool":
        speakers = sorted(per_speaker)
        sequences = np.concatenate([per_speaker[s] for s in speakers])
        labels = np.repeat(np.arange(len(speakers)), [len(per_speaker[s]) for s in speakers])
        return cls(sequences, labels, speakers)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TripletSample:
    pool: SequencePool
    triplets: np.ndarray  # (K, 3) anchor, positive, negative indices into pool
    skipped: int

    @property
    def num_pairs(self) -> int:
        return len(self.triplets) + self.skipped


# --- loss --------------------------------------------------------------------------

def triplet_delta(anchor, positive, negative):
    """Squared anchor-positive distance minus squared anchor-negative distance."""
    anchor, positive, negative = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    return np.sum((anchor - positive) ** 2, axis=-1) - np.sum((anchor - negative) ** 2, axis=-1)


def triplet_loss(deltas, margin: float = 0.2) -> float:
    """Sum of hinge terms ``max(0, delta + margin)``."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    return float(np.sum(np.maximum(0.0, np.asarray(deltas, dtype=np.float64) + margin)))


def triplet_loss_grad(anchor, positive, negative, margin: float = 0.2):
    """Gradient of ``max(0, delta + margin)`` w.r.t. each of the three embeddings.

    Works on single vectors or on ``(K, d)`` stacks; inactive triplets get zeros.
    """
    anchor, positive, negative = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    active = (triplet_delta(anchor, positive, negative) + margin > 0)[..., None]
    return (
        np.where(active, 2.0 * (negative - positive), 0.0),
        np.where(active, 2.0 * (positive - anchor), 0.0),
        np.where(active, 2.0 * (anchor - negative), 0.0),
    )


# --- sampling ------------------------------------------------------------------------

def sample_epoch_triplets(pool: SequencePool, params: TristouNetParams, cfg: TrainConfig,
                          rng: np.random.Generator) -> TripletSample:
    """Hard-negative triplets for one epoch.

    ``cfg.per_speaker`` sequences are drawn from each speaker of ``pool`` and
    embedded once with ``params``.  Every anchor-positive pair of a speaker
    gets one negative drawn uniformly among the candidates that violate the
    margin (``delta + margin > 0``); pairs without any are skipped.
    """
    n = cfg.per_speaker
    num_speakers = len(np.unique(pool.labels))
    if num_speakers < 2:
        raise ValueError("triplet sampling needs at least two speakers")
    chosen = []
    for label in range(int(pool.labels.max()) + 1):
        members = np.flatnonzero(pool.labels == label)
        if len(members) == 0:
            continue
        if len(members) < n:
            name = pool.speakers[label] if pool.speakers else label
            raise ValueError(f"speaker {name} has {len(members)} sequences, need {n}")
        chosen.append(np.sort(rng.choice(members, size=n, replace=False)))
    chosen = np.concatenate(chosen)
    epoch_pool = SequencePool(pool.sequences[chosen], pool.labels[chosen], pool.speakers)

    embeddings = embed_many(params, epoch_pool.sequences)
    labels = epoch_pool.labels
    first, second = np.triu_indices(n, k=1)
    triplets, skipped = [], 0
    for label in np.unique(labels):
        own = np.flatnonzero(labels == label)
        others = np.flatnonzero(labels != label)
        e_own = embeddings[own]
        d_pos = np.sum((e_own[:, None] - e_own[None]) ** 2, axis=-1)
        d_neg = np.sum((e_own[:, None] - embeddings[others][None]) ** 2, axis=-1)
        order = np.argsort(d_neg, axis=1, kind="stable")
        sorted_neg = np.take_along_axis(d_neg, order, axis=1)
        # violating negatives of (a, p) are exactly those with d(a, n) < d(a, p) + margin,
        # i.e. a prefix of the anchor's sorted negatives
        limits = d_pos[first, second] + cfg.margin
        counts = np.empty(len(first), dtype=np.int64)
        for a in range(n):
            rows = first == a
            counts[rows] = np.searchsorted(sorted_neg[a], limits[rows], side="left")
        picks = np.floor(rng.random(len(first)) * counts).astype(np.int64)
        ok = counts > 0
        skipped += int(np.sum(~ok))
        negatives = others[order[first[ok], picks[ok]]]
        triplets.append(np.column_stack([own[first[ok]], own[second[ok]], negatives]))
    triplets = np.concatenate(triplets) if triplets else np.zeros((0, 3), dtype=np.int64)
    return TripletSample(epoch_pool, triplets.astype(np.int64), skipped)


# --- optimization ----------------------------------------------------------------------

def rmsprop_update(params: TristouNetParams, grads: TristouNetParams, state: OptimizerState,
                   learning_rate: float = 1e-3) -> tuple[TristouNetParams, OptimizerState]:
    """``s <- rho s + (1 - rho) g^2``;  ``theta <- theta - lr g / (sqrt(s) + eps)``."""
    new_params, new_acc = {}, {}
    grad_arrays = grads.arrays()
    for name, theta in params.arrays().items():
        g = grad_arrays[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        s = state.rho * state.accumulators[name] + (1.0 - state.rho) * g * g
        new_acc[name] = s
        new_params[name] = theta - learning_rate * g / (np.sqrt(s) + state.epsilon)
    return (
        TristouNetParams.from_arrays(new_params),
        OptimizerState(new_acc, state.rho, state.epsilon, state.step + 1),
    )


def batch_gradients(params: TristouNetParams, sequences: np.ndarray, triplets: np.ndarray,
                    margin: float):
    """Mean hinge loss of a batch of triplets and its parameter gradients.

    Returns ``(loss_sum, active_count, gradients)``; gradients are those of
    the batch mean.  A sequence appearing in several roles accumulates all
    its contributions.
    """
    unique, inverse = np.unique(triplets, return_inverse=True)
    inverse = inverse.reshape(triplets.shape)
    embeddings, cache = embed_batch(params, sequences[unique])
    ea, ep, en = (embeddings[inverse[:, k]] for k in range(3))
    deltas = triplet_delta(ea, ep, en)
    hinge = np.maximum(0.0, deltas + margin)
    active = int(np.sum(hinge > 0))
    ga, gp, gn = triplet_loss_grad(ea, ep, en, margin)
    grad_e = np.zeros_like(embeddings)
    scale = 1.0 / len(triplets)
    for k, g in enumerate((ga, gp, gn)):
        np.add.at(grad_e, inverse[:, k], g * scale)
    if active:
        grads = embed_backward(cache, grad_e)
    else:
        grads = params.zeros_like()
    return float(hinge.sum()), active, grads


def train_epoch(params: TristouNetParams, triplets: np.ndarray, pool: SequencePool,
                cfg: TrainConfig, opt_state: OptimizerState, rng: np.random.Generator,
                epoch: int = 0) -> tuple[TristouNetParams, OptimizerState, EpochStats]:
    """Shuffle ``triplets`` and take one RMSProp step per batch."""
    started = time.perf_counter()
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    order = rng.permutation(len(triplets))
    total, active = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        batch = triplets[order[start:start + cfg.batch_size]]
        loss, n_active, grads = batch_gradients(params, pool.sequences, batch, cfg.margin)
        total += loss
        active += n_active
        params, opt_state = rmsprop_update(params, grads, opt_state, cfg.learning_rate)
    stats = EpochStats(epoch, total, len(triplets), active, 0, time.perf_counter() - started)
    return params, opt_state, stats


def trainable_speakers(corpus: Corpus, duration: float) -> list[str]:
    """Speakers with at least one annotated turn long enough for a crop."""
    probe = np.random.default_rng(0)
    speakers = []
    for speaker in sorted(corpus.speakers):
        try:
            sample_fixed_sequences(corpus, speaker, duration, 1, probe)
        except CorpusError:
            continue
        speakers.append(speaker)
    return speakers


def fit(corpus: Corpus, cfg: TrainConfig, params: TristouNetParams | None = None,
        opt_state: OptimizerState | None = None, rng: np.random.Generator | None = None,
        start_epoch: int = 0, callback=None) -> tuple[TristouNetParams, list[EpochStats]]:
    """Train for ``cfg.epochs`` epochs, resampling sequences and triplets before each.

    ``params``, ``opt_state``, ``rng`` and ``start_epoch`` allow resuming.
    ``callback(epoch_stats, params, opt_state, rng)`` runs after every epoch.
    """
    speakers = trainable_speakers(corpus, cfg.duration)
    if len(speakers) < 2:
        raise ValueError(f"need at least 2 speakers with {cfg.duration} s of material, found {len(speakers)}")
    dropped = len(corpus.speakers) - len(speakers)
    if dropped:
        log.warning("%d speakers have no turn of %.2f s and are ignored", dropped, cfg.duration)
    input_dim = next(iter(corpus.files.values()))[0].dimension
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if params is None:
        params = init_params(cfg.dims(input_dim), rng)
    if params.dims[0] != input_dim:
        raise ValueError(f"model expects {params.dims[0]} features, corpus has {input_dim}")
    if opt_state is None:
        opt_state = OptimizerState.zeros(params, cfg.rho, cfg.epsilon)

    history = []
    for epoch in range(start_epoch, cfg.epochs):
        started = time.perf_counter()
        per_speaker = speaker_sequences(corpus, cfg.duration, cfg.per_speaker, rng, speakers)
        sample = sample_epoch_triplets(SequencePool.from_speakers(per_speaker), params, cfg, rng)
        params, opt_state, stats = train_epoch(
            params, sample.triplets, sample.pool, cfg, opt_state, rng, epoch=epoch + 1
        )
        stats.skipped_pairs = sample.skipped
        stats.wall_time = time.perf_counter() - started
        log.info("epoch %d loss %.4f triplets %d active %d skipped %d (%.1f s)", stats.epoch, stats.loss,
                 stats.num_triplets, stats.active_triplets, stats.skipped_pairs, stats.wall_time)
        history.append(stats)
        if callback is not None:
            callback(stats, params, opt_state, rng)
    return params, history
