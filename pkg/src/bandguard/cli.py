"""Command-line entry point: synth, featurize, train, score, eer, bwe-train, sweep.

Settings come from an optional INI file (``--config``) and are overridden by
flags. Exit codes: 0 success, 1 usage error, 2 data error, 3 internal
invariant violation. Every command appends a record to ``<out>/run.jsonl``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bwe
from .channel import ArtifactConfig, CodecProfile, CorpusSpec, generate_corpus, load_utterance, read_manifest, write_corpus
from .classifier import FULL_SCALE, LrSchedule, TrainConfig, load_model, save_model, score_batch, train, write_log
from .features import read_fbank, write_fbank
from .filters import lowpass_frontend
from .metrics import ScoreRecord, ScoreSet, compute_eer, read_scores, write_scores
from .pipeline import (
    DEFAULT_FRACTIONS,
    DEFAULT_SEEDS,
    ExperimentPlan,
    SilentUtterance,
    expand_frontends,
    featurize_utterance,
    feature_dim,
    parse_frontend,
    run_sweep,
    train_extender,
)

log = logging.getLogger("bandguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config: INI sections [corpus], [train], [featurize], [sweep]; flags win
# ---------------------------------------------------------------------------


def load_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file {path} not found")
        cp.read(path)
    return cp


def setting(args, cfg, section: str, key: str, cast=str, default=None):
    """Flag value if given, else the config entry, else ``default``."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if cfg.has_option(section, key):
        raw = cfg.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise UsageError(f"config [{section}] {key}: {exc}") from None
    return default


def floats(text) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def ints(text) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip())


def words(text) -> tuple[str, ...]:
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def on_off(text) -> bool:
    value = str(text).strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def corpus_spec(args, cfg) -> CorpusSpec:
    n_b = setting(args, cfg, "corpus", "n_bonafide", int, 500)
    n_s = setting(args, cfg, "corpus", "n_spoof", int, 500)
    split = setting(args, cfg, "corpus", "split", floats, (0.6, 0.2, 0.2))
    dur = setting(args, cfg, "corpus", "duration", floats, (2.0, 4.0))
    artifacts = setting(args, cfg, "corpus", "artifacts", on_off, True)
    seed = setting(args, cfg, "corpus", "seed", int, args.seed)
    if len(split) != 3 or abs(sum(split) - 1) > 1e-9:
        raise UsageError("split needs three fractions summing to 1")
    if len(dur) != 2:
        raise UsageError("duration needs min,max seconds")
    return CorpusSpec(
        n_bonafide=n_b, n_spoof=n_s, split=tuple(split), duration_range_s=tuple(dur),
        artifacts=ArtifactConfig(enabled=artifacts), seed=seed,
    )


def train_config(args, cfg) -> TrainConfig:
    preset = setting(args, cfg, "train", "preset", str, "desk")
    if preset not in ("desk", "full"):
        raise UsageError("preset must be desk or full")
    base = FULL_SCALE if preset == "full" else TrainConfig()
    sched = LrSchedule(
        base_lr=setting(args, cfg, "train", "lr", float, 1e-3),
        plateau_patience=setting(args, cfg, "train", "patience", int, 10),
    )
    return TrainConfig(
        batch_size=setting(args, cfg, "train", "batch_size", int, base.batch_size),
        epochs=setting(args, cfg, "train", "epochs", int, base.epochs),
        attn_dim=setting(args, cfg, "train", "attn_dim", int, 128),
        compute_dtype=setting(args, cfg, "train", "compute_dtype", str, "float32"),
        seed=args.seed,
        schedule=sched,
    )


def append_run_record(out_dir, record: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg) -> dict:
    spec = corpus_spec(args, cfg)
    utts = generate_corpus(spec)
    manifest = write_corpus(utts, args.out)
    counts = {s: sum(u.subset == s for u in utts) for s in ("train", "dev", "eval")}
    print(f"wrote {len(utts)} utterances to {manifest} ({counts['train']}/{counts['dev']}/{counts['eval']})")
    return {"manifest": str(manifest), "counts": counts}


def _featurize_one(entry, fe, seed, codec, extender):
    utt = load_utterance(entry)
    try:
        return featurize_utterance(utt, fe, seed, codec, extender)
    except SilentUtterance:
        return None


def _frontend(args, cfg):
    token = setting(args, cfg, "featurize", "frontend", str, "baseline")
    vad = setting(args, cfg, "featurize", "vad", on_off, False)
    augment = setting(args, cfg, "featurize", "augment", on_off, True)
    kw = {"vad": vad}
    if not augment:
        kw["augment"] = None
    try:
        return parse_frontend(token, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _extender_for(fe, args, entries):
    if fe.kind != "lowpass_bwe":
        return None
    if fe.bwe_kind == "replicate":
        return bwe.BweExtender("replicate", fe.fraction)
    if args.bwe_model:
        ext = bwe.load_extender(args.bwe_model)
        if ext.cutoff_fraction != fe.fraction:
            raise ValueError(f"{args.bwe_model}: trained for fraction {ext.cutoff_fraction}, front-end uses {fe.fraction}")
        return ext
    return train_extender([load_utterance(e) for e in entries if e.subset == "train"], fe.fraction, fe.vad)


def cmd_featurize(args, cfg) -> dict:
    fe = _frontend(args, cfg)
    codec = CodecProfile(setting(args, cfg, "featurize", "codec", str, "clean"))
    entries = read_manifest(args.manifest)
    extender = _extender_for(fe, args, entries)
    if args.subset:
        entries = [e for e in entries if e.subset in args.subset]
    out = Path(args.out)
    (out / "fbnk").mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    task = [(e, fe, args.seed, codec, extender) for e in entries]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            feats = list(pool.map(_featurize_one, *zip(*task), chunksize=8))
    else:
        feats = [_featurize_one(*t) for t in task]
    skipped = 0
    with open(out / "features.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for entry, f in zip(entries, feats):
            if f is None:
                log.warning("skipping all-silence utterance %s", entry.utt_id)
                skipped += 1
                continue
            rel = Path("fbnk") / f"{entry.utt_id}.fbnk"
            write_fbank(f, out / rel)
            w.writerow([entry.utt_id, rel.as_posix(), entry.label, entry.subset])
    n = len(entries) - skipped
    print(f"featurized {n} utterances with {fe.label} (dim {feature_dim(fe)}), skipped {skipped} silent")
    return {"frontend": fe.label, "codec": codec.name, "written": n, "skipped_silent": skipped}


def read_feature_index(features_dir, subsets=None):
    """Rows of features.tsv as (utt_id, path, label, subset)."""
    root = Path(features_dir)
    index = root / "features.tsv"
    if not index.is_file():
        raise FileNotFoundError(f"{index} not found (run featurize first)")
    rows = []
    with open(index, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            if len(row) != 4:
                raise ValueError(f"{index}: malformed row {row!r}")
            if subsets is None or row[3] in subsets:
                rows.append((row[0], root / row[1], row[2], row[3]))
    return rows


def load_features(rows):
    """Read every .fbnk; all must share the first file's dimension."""
    out, first = [], None
    for utt, path, label, subset in rows:
        values = read_fbank(path).values
        if first is None:
            first = (path, values.shape[0])
        elif values.shape[0] != first[1]:
            raise ValueError(
                f"feature dimension mismatch: {first[0]} has {first[1]} rows, {path} has {values.shape[0]}"
            )
        out.append(values)
    return out


def _labels(rows) -> np.ndarray:
    return np.array([1 if r[2] == "bonafide" else 0 for r in rows], dtype=np.int64)


def cmd_train(args, cfg) -> dict:
    tcfg = train_config(args, cfg)
    rows = read_feature_index(args.features, {"train", "dev"})
    tr = [r for r in rows if r[3] == "train"]
    dv = [r for r in rows if r[3] == "dev"]
    if not tr:
        raise ValueError(f"{args.features}: no train-subset features")
    feats = load_features(tr + dv)
    model, logs = train(
        feats[: len(tr)], _labels(tr), tcfg,
        feats[len(tr) :] or None, _labels(dv) if dv else None,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.asp")
    write_log(logs, out / "train_log.tsv")
    best = min(r.dev_loss for r in logs)
    print(f"trained {tcfg.epochs} epochs on {len(tr)} utterances; best dev loss {best:.4f}")
    return {"model": str(out / "model.asp"), "best_dev_loss": best, "train": asdict(tcfg)}


def cmd_score(args, cfg) -> dict:
    model = load_model(args.model)
    rows = read_feature_index(args.features, set(args.subset or ["eval"]))
    if not rows:
        raise ValueError(f"{args.features}: no features for subset(s) {args.subset or ['eval']}")
    feats = load_features(rows)
    if feats[0].shape[0] != model.feat_dim:
        raise ValueError(f"model expects {model.feat_dim}-dim features, {rows[0][1]} has {feats[0].shape[0]}")
    scores = score_batch(model, feats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recs = tuple(ScoreRecord(r[0], r[2], float(s)) for r, s in zip(rows, scores))
    write_scores(ScoreSet(recs), out / "scores.tsv")
    print(f"scored {len(recs)} utterances -> {out / 'scores.tsv'}")
    return {"scores": str(out / "scores.tsv"), "n": len(recs)}


def cmd_eer(args, cfg) -> dict:
    res = compute_eer(read_scores(args.scores))
    print(f"EER {100 * res.eer:.4f}%  threshold {res.threshold:.6g}  bonafide {res.n_bonafide}  spoof {res.n_spoof}")
    return asdict(res)


def cmd_bwe_train(args, cfg) -> dict:
    fraction = setting(args, cfg, "bwe", "fraction", float, 0.5)
    max_utts = setting(args, cfg, "bwe", "max_utts", int, 200)
    vad = setting(args, cfg, "bwe", "vad", on_off, False)
    entries = read_manifest(args.manifest)
    train_utts = [load_utterance(e) for e in entries if e.subset == "train"]
    ext = train_extender(train_utts, fraction, vad, max_utts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / f"bwe_{fraction:g}.bwe"
    bwe.save_extender(ext, model_path)
    record = {"model": str(model_path), "fraction": fraction}
    held = [load_utterance(e) for e in entries if e.subset == "dev"][:50]
    if held:
        rep = bwe.BweExtender("replicate", fraction)
        lsd = {"linear_regressor": [], "replicate": []}
        for u in held:
            inp = bwe.BweInput(lowpass_frontend(u.audio, fraction), fraction)
            lsd["linear_regressor"].append(bwe.measure_quality(bwe.extend(inp, ext), u.audio, fraction).lsd)
            lsd["replicate"].append(bwe.measure_quality(bwe.extend(inp, rep), u.audio, fraction).lsd)
        record["dev_lsd"] = {k: float(np.mean(v)) for k, v in lsd.items()}
        print(
            f"dev high-band LSD: regressor {record['dev_lsd']['linear_regressor']:.3f} dB, "
            f"replicate {record['dev_lsd']['replicate']:.3f} dB"
        )
    print(f"wrote {model_path}")
    return record


def build_plan(args, cfg) -> ExperimentPlan:
    fractions = setting(args, cfg, "sweep", "fractions", floats, DEFAULT_FRACTIONS)
    seeds = setting(args, cfg, "sweep", "seeds", ints, DEFAULT_SEEDS)
    tokens = setting(args, cfg, "sweep", "frontends", words, ("baseline", "band_trim", "lowpass", "lowpass_bwe"))
    codecs = setting(args, cfg, "sweep", "codecs", words, ("clean", "g711_mulaw"))
    vad_mode = setting(args, cfg, "sweep", "vad", str, "off")
    augment = setting(args, cfg, "sweep", "augment", on_off, True)
    bwe_max = setting(args, cfg, "sweep", "bwe_max_utts", int, 200)
    if vad_mode not in ("on", "off", "both"):
        raise UsageError("vad must be on, off or both")
    vads = {"off": (False,), "on": (True,), "both": (False, True)}[vad_mode]
    kw = {} if augment else {"augment": None}
    frontends = tuple(fe for v in vads for fe in expand_frontends(tokens, fractions, vad=v, **kw))
    manifest = setting(args, cfg, "corpus", "manifest", str, None)
    corpus = None if manifest else corpus_spec(args, cfg)
    return ExperimentPlan(
        corpus=corpus, manifest=manifest, frontends=frontends, seeds=tuple(seeds),
        codecs=tuple(CodecProfile(c) for c in codecs), train=train_config(args, cfg), bwe_max_utts=bwe_max,
    )


def cmd_sweep(args, cfg) -> dict:
    try:
        plan = build_plan(args, cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cells = run_sweep(plan, args.out, jobs=max(1, args.jobs))
    print((Path(args.out) / "results.txt").read_text(), end="")
    failed = sum(c.status != "ok" for c in cells)
    return {"cells": len(cells), "failed": failed}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; flags override its values")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", help="output directory (optional for eer)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="bandguard", description="Codec-robust anti-spoofing front-ends.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--n-bonafide", dest="n_bonafide", type=int)
    p.add_argument("--n-spoof", dest="n_spoof", type=int)
    p.add_argument("--split", type=floats, help="train,dev,eval fractions")
    p.add_argument("--duration", type=floats, help="min,max seconds of speech")

    p = sub.add_parser("featurize", parents=[common], help="front-end + FBANK for every manifest entry")
    p.add_argument("--manifest", required=True)
    p.add_argument("--frontend", help="baseline | band_trim@F | lowpass@F | lowpass_bwe@F[/replicate]")
    p.add_argument("--vad", type=on_off)
    p.add_argument("--augment", type=on_off, help="augment the train subset (default on)")
    p.add_argument("--codec", help="codec applied to eval-subset audio (clean, g711_mulaw, bandlimit)")
    p.add_argument("--bwe-model", dest="bwe_model", help="regressor for lowpass_bwe (trained on the fly if absent)")
    p.add_argument("--subset", nargs="+", choices=("train", "dev", "eval"))

    p = sub.add_parser("train", parents=[common], help="train the pooling classifier")
    p.add_argument("--preset", choices=("desk", "full"), help="desk: batch 64 x 30 epochs; full: 400 x 100")
    p.add_argument("--features", required=True, help="featurize output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--attn-dim", dest="attn_dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--compute-dtype", dest="compute_dtype", choices=("float32", "float64"))

    p = sub.add_parser("score", parents=[common], help="score featurized utterances")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--subset", nargs="+", choices=("train", "dev", "eval"))

    p = sub.add_parser("eer", parents=[common], help="equal error rate of a score file")
    p.add_argument("scores")

    p = sub.add_parser("bwe-train", parents=[common], help="fit the ridge bandwidth-extension regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--max-utts", dest="max_utts", type=int)
    p.add_argument("--vad", type=on_off)

    p = sub.add_parser("sweep", parents=[common], help="run the front-end x seed x codec grid")
    p.add_argument("--preset", choices=("desk", "full"), help="desk: batch 64 x 30 epochs; full: 400 x 100")
    p.add_argument("--frontends", type=words)
    p.add_argument("--fractions", type=floats)
    p.add_argument("--seeds", type=ints)
    p.add_argument("--codecs", type=words)
    p.add_argument("--vad", choices=("on", "off", "both"))
    p.add_argument("--augment", type=on_off)
    p.add_argument("--manifest", help="use a written corpus instead of synthesizing one")
    p.add_argument("--n-bonafide", dest="n_bonafide", type=int)
    p.add_argument("--n-spoof", dest="n_spoof", type=int)
    p.add_argument("--split", type=floats)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--attn-dim", dest="attn_dim", type=int)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "score": cmd_score,
    "eer": cmd_eer,
    "bwe-train": cmd_bwe_train,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.out is None and args.command != "eer":
            parser.error(f"{args.command} needs --out")
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    status, code, detail = "ok", EXIT_OK, {}
    try:
        cfg = load_config(args.config)
        detail = COMMANDS[args.command](args, cfg) or {}
    except UsageError as exc:
        status, code = f"usage error: {exc}", EXIT_USAGE
    except (FloatingPointError, AssertionError) as exc:
        status, code = f"invariant violation: {exc}", EXIT_INVARIANT
    except (ValueError, OSError, configparser.Error) as exc:
        status, code = f"data error: {exc}", EXIT_DATA
    if code != EXIT_OK:
        print(f"bandguard {args.command}: {status}", file=sys.stderr)
    if args.out is None:
        return code
    try:
        append_run_record(args.out, {
            "command": args.command, "argv": list(sys.argv[1:] if argv is None else argv),
            "status": status, "exit_code": code, "seconds": round(time.time() - started, 3), **detail,
        })
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
