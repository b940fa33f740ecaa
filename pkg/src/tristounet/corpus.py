"""Audio and annotation ingestion, synthetic corpora and fixed-length crops."""

from __future__ import annotations

import json
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter


class CorpusError(ValueError):
    """Raised on malformed audio, annotation or corpus input."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise CorpusError(f"sample_rate={self.sample_rate} must be positive")
        if np.ndim(self.samples) != 1:
            raise CorpusError("only mono signals are supported")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, order=True)
class Segment:
    start: float
    end: float

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise CorpusError(f"invalid segment [{self.start}, {self.end}]")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def intersection(self, other: "Segment") -> float:
        return max(0.0, min(self.end, other.end) - max(self.start, other.start))


@dataclass
class Annotation:
    """Reference speech turns of one file, sorted and non-overlapping."""

    uri: str
    entries: list[tuple[Segment, str]] = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e[0].start, e[0].end))
        for (prev, spk_a), (cur, spk_b) in zip(self.entries, self.entries[1:]):
            if cur.start < prev.end:
                raise CorpusError(
                    f"{self.uri}: overlapping segments "
                    f"[{prev.start}, {prev.end}] ({spk_a}) and [{cur.start}, {cur.end}] ({spk_b})"
                )

    @property
    def segments(self) -> list[Segment]:
        return [segment for segment, _ in self.entries]

    @property
    def speakers(self) -> set[str]:
        return {speaker for _, speaker in self.entries}

    def extent(self) -> Segment:
        return Segment(self.entries[0][0].start, self.entries[-1][0].end)


@dataclass
class FeatureSequence:
    """T x F matrix of frames; frame ``i`` starts at ``origin + i * frame_step``."""

    frames: np.ndarray
    frame_step: float
    frame_duration: float
    origin: float = 0.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise CorpusError(f"frames must be a non-empty T x F matrix, got {self.frames.shape}")
        if self.frame_step <= 0:
            raise CorpusError("frame_step must be positive")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dimension(self) -> int:
        return self.frames.shape[1]

    @property
    def end(self) -> float:
        return self.origin + len(self) * self.frame_step

    def crop(self, start: int, num_frames: int) -> "FeatureSequence":
        return FeatureSequence(
            self.frames[start:start + num_frames],
            self.frame_step,
            self.frame_duration,
            self.origin + start * self.frame_step,
        )


@dataclass
class Corpus:
    files: dict[str, tuple[FeatureSequence, Annotation]]

    def __post_init__(self):
        for uri, (features, annotation) in self.files.items():
            tol = 1e-6
            for segment, _ in annotation.entries:
                if segment.start < features.origin - tol or segment.end > features.end + tol:
                    raise CorpusError(
                        f"{uri}: segment [{segment.start}, {segment.end}] outside features "
                        f"[{features.origin}, {features.end}]"
                    )

    @property
    def speakers(self) -> set[str]:
        speakers: set[str] = set()
        for _, annotation in self.files.values():
            speakers |= annotation.speakers
        return speakers

    @property
    def uris(self) -> list[str]:
        return sorted(self.files)


@dataclass(frozen=True)
class SynthConfig:
    num_speakers: int = 20
    feature_dim: int = 35
    mean_scale: float = 1.0
    ar_coefficient: float = 0.8
    noise_scale: float = 1.0
    turns_per_file: int = 10
    turn_duration_range: tuple[float, float] = (4.0, 10.0)
    num_files: int | None = None
    # optional session variability; defaults give the plain isotropic model
    speaker_rank: int | None = None
    channel_scale: float = 0.0
    frame_step: float = 0.02
    frame_duration: float = 0.032
    speaker_prefix: str = "spk"
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1:
            raise CorpusError("num_speakers must be >= 1")
        if self.feature_dim < 1:
            raise CorpusError("feature_dim must be >= 1")
        if not (0.0 <= self.ar_coefficient < 1.0):
            raise CorpusError("ar_coefficient must lie in [0, 1)")
        if self.noise_scale <= 0:
            raise CorpusError("noise_scale must be positive")
        lo, hi = self.turn_duration_range
        if not (0 < lo < hi):
            raise CorpusError("turn_duration_range must satisfy 0 < min < max")
        if self.turns_per_file < 1:
            raise CorpusError("turns_per_file must be >= 1")
        if self.speaker_rank is not None and not (1 <= self.speaker_rank <= self.feature_dim):
            raise CorpusError("speaker_rank must lie in [1, feature_dim]")
        if self.channel_scale < 0:
            raise CorpusError("channel_scale must be >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if "turn_duration_range" in data:
            data["turn_duration_range"] = tuple(data["turn_duration_range"])
        return cls(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["turn_duration_range"] = list(self.turn_duration_range)
        return data


# --- WAV and annotation files -------------------------------------------------

SUPPORTED_RATE = 16000


def load_wav(path) -> AudioSignal:
    """Read a 16 kHz mono PCM16 RIFF/WAVE file, scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as f:
            channels = f.getnchannels()
            width = f.getsampwidth()
            rate = f.getframerate()
            comptype = f.getcomptype()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as exc:
        raise CorpusError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if comptype != "NONE":
        raise CorpusError(f"{path}: compression={comptype} unsupported")
    if channels != 1:
        raise CorpusError(f"{path}: channels={channels} unsupported")
    if width != 2:
        raise CorpusError(f"{path}: sample width={8 * width} bits unsupported")
    if rate != SUPPORTED_RATE:
        raise CorpusError(f"{path}: sample rate={rate} unsupported (expected {SUPPORTED_RATE})")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples, rate)


def save_wav(signal: AudioSignal, path) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(signal.sample_rate)
        f.writeframes(pcm.tobytes())


def _parse_annotation_lines(lines, source) -> dict[str, list[tuple[Segment, str]]]:
    entries: dict[str, list[tuple[Segment, str]]] = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 4:
            raise CorpusError(f"{source}:{lineno}: expected 'uri start end speaker', got {line!r}")
        uri, start, end, speaker = fields
        try:
            segment = Segment(float(start), float(end))
        except ValueError as exc:
            raise CorpusError(f"{source}:{lineno}: {exc}") from exc
        entries.setdefault(uri, []).append((segment, speaker))
    return entries


def load_annotations(path) -> dict[str, Annotation]:
    """Load every file's annotation from a 4-column ``uri start end speaker`` file."""
    text = Path(path).read_text(encoding="utf-8")
    parsed = _parse_annotation_lines(text.splitlines(), path)
    return {uri: Annotation(uri, entries) for uri, entries in parsed.items()}


def load_annotation(path) -> Annotation:
    annotations = load_annotations(path)
    if len(annotations) != 1:
        raise CorpusError(f"{path}: expected exactly one uri, found {sorted(annotations)}")
    return next(iter(annotations.values()))


def format_annotation(annotation: Annotation) -> str:
    return "".join(
        f"{annotation.uri} {segment.start!r} {segment.end!r} {speaker}\n"
        for segment, speaker in annotation.entries
    )


def save_annotation(annotation: Annotation, path) -> None:
    Path(path).write_text(format_annotation(annotation), encoding="utf-8")


# --- feature blobs --------------------------------------------------------------

def save_features(features: FeatureSequence, blob_path, uri: str) -> None:
    """Write a float32 little-endian row-major blob plus a ``.json`` sidecar."""
    blob_path = Path(blob_path)
    blob_path.write_bytes(features.frames.astype("<f4").tobytes())
    sidecar = {
        "uri": uri,
        "T": len(features),
        "F": features.dimension,
        "frame_step": features.frame_step,
        "frame_duration": features.frame_duration,
        "origin": features.origin,
    }
    blob_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_features(blob_path) -> tuple[str, FeatureSequence]:
    blob_path = Path(blob_path)
    meta = json.loads(blob_path.with_suffix(".json").read_text())
    data = np.frombuffer(blob_path.read_bytes(), dtype="<f4")
    if data.size != meta["T"] * meta["F"]:
        raise CorpusError(f"{blob_path}: expected {meta['T']}x{meta['F']} floats, found {data.size}")
    frames = data.reshape(meta["T"], meta["F"]).astype(np.float64)
    return meta["uri"], FeatureSequence(
        frames, meta["frame_step"], meta["frame_duration"], meta.get("origin", 0.0)
    )


def save_corpus(corpus: Corpus, directory, metadata: dict | None = None) -> Path:
    """Write ``<uri>.f32`` + ``<uri>.json`` + ``<uri>.txt`` per file and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for uri in corpus.uris:
        features, annotation = corpus.files[uri]
        save_features(features, directory / f"{uri}.f32", uri)
        save_annotation(annotation, directory / f"{uri}.txt")
    manifest = {
        "files": corpus.uris,
        "speakers": sorted(corpus.speakers),
        "feature_dim": next(iter(corpus.files.values()))[0].dimension if corpus.files else 0,
    }
    manifest.update(metadata or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CorpusError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    files = {}
    for uri in manifest["files"]:
        _, features = load_features(directory / f"{uri}.f32")
        annotation = load_annotation(directory / f"{uri}.txt")
        files[uri] = (features, annotation)
    return Corpus(files)


# --- synthetic corpus -------------------------------------------------------------

def generate_synthetic_corpus(cfg: SynthConfig) -> Corpus:
    """Build a corpus of AR(1) Gaussian speakers directly in feature space.

    Each speaker ``s`` has a mean ``mu_s ~ N(0, mean_scale^2 I)``, or, with
    ``speaker_rank`` set, a mean confined to a random ``speaker_rank``-dim
    subspace.  ``channel_scale > 0`` adds one Gaussian offset per turn
    (session variability), isotropic by default and restricted to the
    orthogonal complement of the speaker subspace when ``speaker_rank`` is set.  Within a
    turn, ``x_t = mu_s + a (x_{t-1} - mu_s) + eps_t`` with
    ``eps_t ~ N(0, noise_scale^2 I)``; the first frame of every turn is drawn
    from the stationary distribution so turn boundaries are sharp.  Consecutive
    turns always change speaker.  Turn boundaries fall on the frame grid.
    """
    rng = np.random.default_rng(cfg.seed)
    width = len(str(cfg.num_speakers - 1))
    speakers = [f"{cfg.speaker_prefix}{i:0{width}d}" for i in range(cfg.num_speakers)]
    if cfg.speaker_rank is None:
        means = rng.standard_normal((cfg.num_speakers, cfg.feature_dim)) * cfg.mean_scale
        channel_basis = np.eye(cfg.feature_dim)
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, cfg.feature_dim)))
        speaker_basis = basis[:, :cfg.speaker_rank]
        channel_basis = basis[:, cfg.speaker_rank:]
        means = rng.standard_normal((cfg.num_speakers, cfg.speaker_rank)) @ speaker_basis.T * cfg.mean_scale

    num_files = cfg.num_files
    if num_files is None:
        # about two turns per speaker
        num_files = max(1, int(np.ceil(cfg.num_speakers / min(cfg.turns_per_file, cfg.num_speakers))) * 2)
    a = cfg.ar_coefficient
    stationary_std = cfg.noise_scale / np.sqrt(1.0 - a * a)
    lo, hi = cfg.turn_duration_range
    step = cfg.frame_step

    # speakers are dealt round-robin from shuffled decks so everyone gets material
    deck: list[int] = []

    def next_speaker(previous: int | None) -> int:
        if len(deck) < 2:
            deck[:0] = [int(i) for i in rng.permutation(cfg.num_speakers)]
        if deck[-1] == previous:
            j = next(i for i, spk in enumerate(deck) if spk != previous)
            deck[-1], deck[j] = deck[j], deck[-1]
        return deck.pop()

    files = {}
    for k in range(num_files):
        uri = f"synth{k:03d}"
        chunks, entries = [], []
        position = 0
        previous = None
        for _ in range(cfg.turns_per_file):
            speaker = next_speaker(previous) if cfg.num_speakers > 1 else 0
            previous = speaker
            num_frames = max(1, int(round(rng.uniform(lo, hi) / step)))
            noise = rng.standard_normal((num_frames, cfg.feature_dim)) * cfg.noise_scale
            noise[0] *= stationary_std / cfg.noise_scale
            deviation = lfilter([1.0], [1.0, -a], noise, axis=0)
            if cfg.channel_scale > 0:
                deviation += channel_basis @ rng.standard_normal(channel_basis.shape[1]) * cfg.channel_scale
            chunks.append(deviation + means[speaker])
            entries.append(
                (Segment(round(position * step, 9), round((position + num_frames) * step, 9)), speakers[speaker])
            )
            position += num_frames
        features = FeatureSequence(np.concatenate(chunks), step, cfg.frame_duration, 0.0)
        files[uri] = (features, Annotation(uri, entries))
    return Corpus(files)


# --- fixed-duration crops ---------------------------------------------------------

def _valid_offsets(corpus: Corpus, speaker: str, num_frames: int):
    """(uri, first valid start frame, number of valid starts) per usable segment."""
    choices = []
    for uri in corpus.uris:
        features, annotation = corpus.files[uri]
        step = features.frame_step
        for segment, spk in annotation.entries:
            if spk != speaker:
                continue
            first = int(np.ceil((segment.start - features.origin) / step - 1e-9))
            last = int(np.floor((segment.end - features.origin) / step + 1e-9)) - num_frames
            last = min(last, len(features) - num_frames)
            if last >= first:
                choices.append((uri, first, last - first + 1))
    return choices


def sample_fixed_sequences(corpus: Corpus, speaker: str, duration: float, count: int,
                           rng: np.random.Generator) -> list[FeatureSequence]:
    """Draw ``count`` contiguous crops of ``duration`` seconds from one speaker's turns.

    Crops are uniform over every valid (segment, offset) pair.  Within a call
    they are distinct whenever enough distinct offsets exist.
    """
    if not corpus.files:
        raise CorpusError("empty corpus")
    step = next(iter(corpus.files.values()))[0].frame_step
    num_frames = int(round(duration / step))
    if num_frames < 1:
        raise CorpusError(f"duration={duration} shorter than one frame")
    choices = _valid_offsets(corpus, speaker, num_frames)
    if not choices:
        raise CorpusError(f"speaker {speaker!r} has no annotated segment of at least {duration} s")
    sizes = np.array([n for _, _, n in choices])
    total = int(sizes.sum())
    flat = rng.choice(total, size=count, replace=count > total)
    bounds = np.cumsum(sizes)
    which = np.searchsorted(bounds, flat, side="right")
    sequences = []
    for idx, w in zip(flat, which):
        uri, first, _ = choices[w]
        offset = first + int(idx - (bounds[w] - sizes[w]))
        sequences.append(corpus.files[uri][0].crop(offset, num_frames))
    return sequences


def speaker_sequences(corpus: Corpus, duration: float, count: int, rng: np.random.Generator,
                      speakers=None) -> dict[str, np.ndarray]:
    """Sample ``count`` crops per speaker, stacked as ``(count, T, F)`` arrays."""
    speakers = sorted(corpus.speakers) if speakers is None else list(speakers)
    return {
        spk: np.stack([s.frames for s in sample_fixed_sequences(corpus, spk, duration, count, rng)])
        for spk in speakers
    }


def subset_speakers(corpus: Corpus, speakers) -> Corpus:
    """Same files, with annotations restricted to ``speakers``; files left empty are dropped."""
    keep = set(speakers)
    files = {}
    for uri, (features, annotation) in corpus.files.items():
        entries = [(seg, spk) for seg, spk in annotation.entries if spk in keep]
        if entries:
            files[uri] = (features, Annotation(uri, entries))
    return Corpus(files)
