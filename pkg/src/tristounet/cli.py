"""Command-line entry point: ``tristounet {synth,features,train,eval-eer,scd}``.

Every command reads an optional JSON config (``--config``) whose sections
mirror the dataclasses of the library; command-line flags override config
fields.  Output artifacts carry the effective config hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .corpus import (
    Annotation,
    Corpus,
    CorpusError,
    Segment,
    SynthConfig,
    generate_synthetic_corpus,
    load_annotations,
    load_corpus,
    load_wav,
    save_corpus,
    speaker_sequences,
)
from .evaluation import (
    SCORERS,
    BicScorer,
    DivergenceScorer,
    EmbeddingScorer,
    TrialSet,
    change_recall,
    changes_to_segments,
    coverage_terms,
    det_curve,
    detect_peaks,
    eer,
    scd_distance_curve,
)
from .features import FeatureConfig, stack_features
from .nn import ModelFormatError, load_params, read_model_file, save_params
from .training import EpochStats, OptimizerState, TrainConfig, fit, trainable_speakers

log = logging.getLogger("tristounet")

METHODS = sorted(SCORERS)
DEFAULT_EVAL = {
    "method": "embedding",
    "duration": 2.0,
    "per_speaker": 100,
    "include_training_speakers": False,
    "bic_penalty": 1.0,
}
DEFAULT_SCD = {
    "method": "embedding",
    "window": 2.0,
    "step": 0.1,
    "context": 1.0,
    "thresholds": None,
    "num_thresholds": 50,
    "tolerance": 0.25,
    "bic_penalty": 1.0,
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


# --- config handling -------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CliError(f"config {path} must be a JSON object")
    return data


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise CliError(f"config section {name!r} must be an object")
    return dict(section)


def _dataclass_from(cls, values: dict, overrides: dict):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise CliError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    merged = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    if "turn_duration_range" in merged:
        merged["turn_duration_range"] = tuple(merged["turn_duration_range"])
    return cls(**merged)


def _merge(defaults: dict, values: dict, overrides: dict) -> dict:
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise CliError(f"unknown settings: {', '.join(unknown)}")
    merged = {**defaults, **values}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def config_hash(effective: dict) -> str:
    canonical = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _fmt(value: float) -> str:
    return repr(float(value))


def _map(workers: int, fn, items):
    """Ordered map, optionally over a process pool; results never depend on ``workers``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- synth ------------------------------------------------------------------------

def cmd_synth(args, config: dict) -> dict:
    seed = _seed(args, config)
    cfg = _dataclass_from(SynthConfig, _section(config, "synth"),
                          {"num_speakers": args.num_speakers, "seed": seed})
    effective = {"synth": cfg.to_dict(), "seed": seed}
    corpus = generate_synthetic_corpus(cfg)
    out = _out_dir(args)
    save_corpus(corpus, out, {"config": effective, "config_hash": config_hash(effective), "seed": seed})
    return {"files": len(corpus.files), "speakers": len(corpus.speakers)}


# --- features ---------------------------------------------------------------------

def _extract_one(job):
    wav_path, cfg = job
    return stack_features(load_wav(wav_path), cfg)


def _clip_annotation(annotation: Annotation, start: float, end: float) -> Annotation:
    entries = []
    for segment, speaker in annotation.entries:
        a, b = max(segment.start, start), min(segment.end, end)
        if b > a:
            entries.append((Segment(a, b), speaker))
    return Annotation(annotation.uri, entries)


def cmd_features(args, config: dict) -> dict:
    seed = _seed(args, config)
    section = _section(config, "features")
    base = FeatureConfig.baseline() if args.baseline else FeatureConfig()
    overrides = {k: v for k, v in base.to_dict().items() if k not in section}
    cfg = _dataclass_from(FeatureConfig, section, overrides)
    annotations = load_annotations(args.annotations)
    audio_dir = Path(args.audio_dir)
    uris = sorted(annotations)
    missing = [u for u in uris if not (audio_dir / f"{u}.wav").exists()]
    if missing:
        raise CliError(f"missing audio for: {', '.join(missing)}")
    features = _map(args.workers, _extract_one, [(audio_dir / f"{u}.wav", cfg) for u in uris])
    files = {}
    for uri, feats in zip(uris, features):
        # the last partial frame is dropped, so turns are clipped to the frame grid
        files[uri] = (feats, _clip_annotation(annotations[uri], feats.origin, feats.end))
    effective = {"features": cfg.to_dict(), "seed": seed}
    save_corpus(Corpus(files), _out_dir(args),
                {"config": effective, "config_hash": config_hash(effective), "seed": seed})
    return {"files": len(files), "feature_dim": cfg.dimension}


# --- train ------------------------------------------------------------------------

CSV_FIELDS = ["epoch", "loss", "active_triplets", "skipped_pairs", "wall_time_s"]


def _duration_tag(duration: float) -> str:
    return f"{duration:g}s"


def _csv_row(stats: EpochStats) -> list:
    return [stats.epoch, _fmt(stats.loss), stats.active_triplets, stats.skipped_pairs, f"{stats.wall_time:.3f}"]


def _load_checkpoint(path, input_dim: int):
    header, arrays = read_model_file(path)
    meta = header.get("meta", {})
    if "epoch" not in meta or "rng_state" not in meta:
        raise CliError(f"{path} is a model file, not a training checkpoint")
    params = load_params(path, input_dim)
    accumulators = {k[len("extra.acc."):]: v for k, v in arrays.items() if k.startswith("extra.acc.")}
    opt = OptimizerState(accumulators, meta["rho"], meta["epsilon"], meta["step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return params, opt, rng, int(meta["epoch"])


def _train_one(job) -> dict:
    corpus_dir, cfg, out, effective, resume, every = job
    corpus = load_corpus(corpus_dir)
    tag = _duration_tag(cfg.duration)
    input_dim = next(iter(corpus.files.values()))[0].dimension
    speakers = trainable_speakers(corpus, cfg.duration)
    base_meta = {
        "config": effective,
        "config_hash": config_hash(effective),
        "seed": cfg.seed,
        "duration": cfg.duration,
        "training_speakers": speakers,
    }
    csv_path = out / f"train_{tag}.csv"
    rows = []
    params = opt = rng = None
    start = 0
    if resume is not None:
        params, opt, rng, start = _load_checkpoint(resume, input_dim)
        if csv_path.exists():
            with csv_path.open() as f:
                rows = [r for r in list(csv.reader(f))[1:] if int(r[0]) <= start]

    def on_epoch(stats, params, opt_state, rng):
        rows.append(_csv_row(stats))
        if every and stats.epoch % every == 0:
            meta = dict(base_meta, epoch=stats.epoch, rng_state=rng.bit_generator.state,
                        rho=opt_state.rho, epsilon=opt_state.epsilon, step=opt_state.step)
            extra = {f"acc.{k}": v for k, v in opt_state.accumulators.items()}
            save_params(params, out / f"checkpoint_{tag}_epoch{stats.epoch:04d}.bin", extra=extra, meta=meta)

    params, history = fit(corpus, cfg, params=params, opt_state=opt, rng=rng, start_epoch=start,
                          callback=on_epoch)
    save_params(params, out / f"model_{tag}.bin", meta=dict(base_meta, epoch=max(start, cfg.epochs)))
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_FIELDS)
        writer.writerows(rows)
    return {"duration": cfg.duration, "epochs": len(history), "model": str(out / f"model_{tag}.bin")}


def cmd_train(args, config: dict) -> dict:
    seed = _seed(args, config)
    section = _section(config, "train")
    durations = section.pop("durations", None)
    if args.durations is not None:
        durations = args.durations
    durations = [float(d) for d in (durations or [section.get("duration", 2.0)])]
    cfg = _dataclass_from(TrainConfig, section, {"epochs": args.epochs, "per_speaker": args.per_speaker,
                                                 "seed": seed})
    if args.resume is not None and len(durations) != 1:
        raise CliError("--resume needs exactly one duration")
    corpus = load_corpus(args.corpus)
    if len(corpus.speakers) < 2:
        raise CliError(f"training needs at least 2 speakers, corpus has {len(corpus.speakers)}")
    out = _out_dir(args)
    jobs = []
    for duration in durations:
        run_cfg = replace(cfg, duration=duration)
        effective = {"train": run_cfg.to_dict(), "seed": seed}
        jobs.append((args.corpus, run_cfg, out, effective, args.resume, args.checkpoint_every))
    return {"models": _map(args.workers, _train_one, jobs)}


# --- shared scorer setup ----------------------------------------------------------

def _scorer(method: str, model, corpus: Corpus, bic_penalty: float):
    if method not in SCORERS:
        raise CliError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if method == "embedding":
        if model is None:
            raise CliError("method 'embedding' needs --model")
        input_dim = next(iter(corpus.files.values()))[0].dimension
        params = load_params(model, input_dim)
        header, _ = read_model_file(model)
        return EmbeddingScorer(params), header.get("meta", {})
    if method == "bic":
        return BicScorer(bic_penalty), {}
    return DivergenceScorer(), {}


def _score_chunk(job):
    scorer, rep, i, j = job
    return scorer.pair_scores(rep, i, j)


# --- eval-eer ---------------------------------------------------------------------

def cmd_eval_eer(args, config: dict) -> dict:
    seed = _seed(args, config)
    settings = _merge(DEFAULT_EVAL, _section(config, "eval"), {
        "method": args.method, "duration": args.duration, "per_speaker": args.per_speaker,
        "include_training_speakers": args.include_training_speakers or None, "bic_penalty": args.bic_penalty,
    })
    corpus = load_corpus(args.corpus)
    scorer, model_meta = _scorer(settings["method"], args.model, corpus, settings["bic_penalty"])
    speakers = trainable_speakers(corpus, settings["duration"])
    excluded = []
    if not settings["include_training_speakers"]:
        trained = set(model_meta.get("training_speakers", []))
        excluded = sorted(s for s in speakers if s in trained)
        speakers = [s for s in speakers if s not in trained]
    if len(speakers) < 2:
        raise CliError(f"evaluation needs at least 2 speakers, {len(speakers)} available"
                       + (f" after excluding {len(excluded)} training speakers" if excluded else ""))
    rng = np.random.default_rng(seed)
    per_speaker = speaker_sequences(corpus, settings["duration"], settings["per_speaker"], rng, speakers)

    names = sorted(per_speaker)
    sequences = np.concatenate([per_speaker[s] for s in names])
    labels = np.repeat(np.arange(len(names)), [len(per_speaker[s]) for s in names])
    rep = scorer.represent(sequences)
    i, j = np.triu_indices(len(sequences), k=1)
    chunk = getattr(scorer, "chunk", 200_000)
    jobs = [(scorer, rep, i[k:k + chunk], j[k:k + chunk]) for k in range(0, len(i), chunk)]
    trials = TrialSet(np.concatenate(_map(args.workers, _score_chunk, jobs)), labels[i] == labels[j])
    curve = det_curve(trials)
    value = eer(curve)

    effective = {"eval": settings, "seed": seed, "model": model_meta.get("config_hash")}
    tag = f"{settings['method']}_{_duration_tag(settings['duration'])}"
    out = _out_dir(args)
    points = [[None if not np.isfinite(t) else float(t), float(a), float(b)]
              for t, a, b in zip(curve.thresholds, curve.fpr, curve.fnr)]
    _write_json(out / f"eer_{tag}.json", {
        "eer": value,
        "num_trials": len(trials),
        "curve": points,
        "method": settings["method"],
        "duration": settings["duration"],
        "speakers": names,
        "excluded_training_speakers": excluded,
        "config": effective,
        "config_hash": config_hash(effective),
        "seed": seed,
    })
    with (out / f"det_{tag}.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "fpr", "fnr"])
        writer.writerows([_fmt(t), _fmt(a), _fmt(b)] for t, a, b in zip(curve.thresholds, curve.fpr, curve.fnr))
    with (out / f"trials_{tag}.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["score", "label"])
        writer.writerows([_fmt(s), "same" if l else "different"] for s, l in zip(trials.scores, trials.labels))
    return {"eer": value, "num_trials": len(trials)}


# --- scd --------------------------------------------------------------------------

def _scd_file(job):
    features, scorer, window, step, context = job
    curve = scd_distance_curve(features, scorer, window, step)
    peaks = detect_peaks(curve, context)
    values = {round(t, 9): v for t, v in zip(curve.times, curve.values)}
    return curve, [(t, float(values[round(t, 9)])) for t in peaks]


def _auto_thresholds(values: list[float], count: int) -> list[float]:
    if not values:
        return [0.0]
    lo, hi = min(values), max(values)
    if hi <= lo:
        return [lo]
    # from every peak kept to none kept
    return list(np.linspace(lo, hi + (hi - lo) / max(count - 1, 1), count))


def cmd_scd(args, config: dict) -> dict:
    seed = _seed(args, config)
    settings = _merge(DEFAULT_SCD, _section(config, "scd"), {
        "method": args.method, "window": args.window, "step": args.step, "context": args.context,
        "thresholds": args.thresholds, "num_thresholds": args.num_thresholds, "tolerance": args.tolerance,
        "bic_penalty": args.bic_penalty,
    })
    corpus = load_corpus(args.corpus)
    scorer, model_meta = _scorer(settings["method"], args.model, corpus, settings["bic_penalty"])
    uris = corpus.uris
    jobs = [(corpus.files[u][0], scorer, settings["window"], settings["step"], settings["context"]) for u in uris]
    results = _map(args.workers, _scd_file, jobs)

    if settings["thresholds"] is None:
        thresholds = _auto_thresholds([v for _, peaks in results for _, v in peaks], settings["num_thresholds"])
    else:
        thresholds = sorted(float(t) for t in settings["thresholds"])
    report_threshold = args.threshold if args.threshold is not None else thresholds[len(thresholds) // 2]

    files, rows = {}, []
    sums = {t: [0.0, 0.0, 0.0, 0.0, 0] for t in thresholds}
    total_hits = total_changes = 0
    for uri, (curve, peaks) in zip(uris, results):
        features, annotation = corpus.files[uri]
        extent = Segment(features.origin, features.end)
        for t in thresholds:
            changes = [p for p, v in peaks if v >= t and extent.start < p < extent.end]
            hyp = changes_to_segments(changes, extent)
            cov_num, cov_den = coverage_terms(annotation, hyp)
            pur_num, pur_den = coverage_terms(hyp, annotation)
            acc = sums[t]
            acc[0] += pur_num
            acc[1] += pur_den
            acc[2] += cov_num
            acc[3] += cov_den
            acc[4] += len(changes)
        chosen = [p for p, v in peaks if v >= report_threshold and extent.start < p < extent.end]
        hits, count = change_recall(annotation, chosen, settings["tolerance"])
        total_hits += hits
        total_changes += count
        files[uri] = {
            "changes": chosen,
            "peaks": [[p, v] for p, v in peaks],
            "recall_hits": hits,
            "true_changes": count,
            "empty_curve": len(curve.times) == 0,
        }
    for t in thresholds:
        pur_num, pur_den, cov_num, cov_den, n = sums[t]
        rows.append([_fmt(t), _fmt(pur_num / pur_den), _fmt(cov_num / cov_den), n])

    effective = {"scd": dict(settings, thresholds=thresholds), "seed": seed, "model": model_meta.get("config_hash")}
    out = _out_dir(args)
    method = settings["method"]
    _write_json(out / f"scd_{method}.json", {
        "method": method,
        "threshold": report_threshold,
        "recall": total_hits / total_changes if total_changes else None,
        "files": files,
        "config": effective,
        "config_hash": config_hash(effective),
        "seed": seed,
    })
    with (out / f"purity_coverage_{method}.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "purity", "coverage", "num_changes"])
        writer.writerows(rows)
    return {"files": len(files), "thresholds": len(thresholds)}


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tristounet", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config document")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--workers", type=int, default=1, help="process pool size (results do not depend on it)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--num-speakers", type=int)

    p = sub.add_parser("features", help="extract features from WAV files")
    p.add_argument("--audio-dir", required=True, help="directory holding <uri>.wav files")
    p.add_argument("--annotations", required=True, help="'uri start end speaker' file")
    p.add_argument("--baseline", action="store_true", help="derivative-free 12-dim set")

    p = sub.add_parser("train", help="train one model per sequence duration")
    p.add_argument("--corpus", required=True)
    p.add_argument("--durations", type=float, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--per-speaker", type=int)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="K")
    p.add_argument("--resume", help="checkpoint file to continue from")

    for name, helptext in (("eval-eer", "same/different trials and EER"), ("scd", "speaker change detection")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--corpus", required=True)
        p.add_argument("--method", help=f"one of: {', '.join(METHODS)}")
        p.add_argument("--model", help="model file for the embedding method")
        p.add_argument("--bic-penalty", type=float)
    p_eval, p_scd = sub.choices["eval-eer"], sub.choices["scd"]
    p_eval.add_argument("--duration", type=float)
    p_eval.add_argument("--per-speaker", type=int)
    p_eval.add_argument("--include-training-speakers", action="store_true")
    p_scd.add_argument("--window", type=float)
    p_scd.add_argument("--step", type=float)
    p_scd.add_argument("--context", type=float)
    p_scd.add_argument("--thresholds", type=float, nargs="+")
    p_scd.add_argument("--num-thresholds", type=int)
    p_scd.add_argument("--threshold", type=float, help="threshold for the per-file change lists")
    p_scd.add_argument("--tolerance", type=float)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "train": cmd_train,
    "eval-eer": cmd_eval_eer,
    "scd": cmd_scd,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.workers < 1:
            raise CliError("--workers must be >= 1")
        summary = COMMANDS[args.command](args, _read_config(args.config))
    except (CliError, CorpusError, ModelFormatError, ValueError, OSError, ArithmeticError) as exc:
        message = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
