"""Front-end wiring, featurization, training/scoring cells and the sweep runner."""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bwe
from .channel import (
    AugmentConfig,
    CodecProfile,
    CorpusSpec,
    Utterance,
    apply_codec,
    augment_audio,
    generate_corpus,
    load_utterance,
    read_manifest,
    sub_rng,
)
from .classifier import AspModel, EpochLog, TrainConfig, score_batch, train
from .features import FbankMatrix, fbank, normalize_length, trim_bands, trim_index, vad_trim
from .filters import lowpass_frontend
from .metrics import EerResult, eer_from_arrays
from .signal import AudioBuffer

log = logging.getLogger(__name__)

FRONTEND_KINDS = ("baseline", "band_trim", "lowpass", "lowpass_bwe")
DEFAULT_FRACTIONS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_SEEDS = (1, 10, 100)

_AUG_STREAM = 0x5EED_A0
_LEN_STREAM = 0x5EED_B1


@dataclass(frozen=True)
class FrontendConfig:
    kind: str = "baseline"
    fraction: float | None = None
    bwe_kind: str = "linear_regressor"
    vad: bool = False
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.kind not in FRONTEND_KINDS:
            raise ValueError(f"unknown front-end {self.kind!r}")
        if self.kind != "baseline" and self.fraction is None:
            raise ValueError(f"front-end {self.kind} needs a cutoff fraction")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.bwe_kind not in bwe.KINDS:
            raise ValueError(f"unknown bwe kind {self.bwe_kind!r}")

    @property
    def label(self) -> str:
        if self.kind == "baseline":
            return "baseline"
        tag = f"{self.kind}@{self.fraction:g}"
        if self.kind == "lowpass_bwe" and self.bwe_kind != "linear_regressor":
            tag += f"/{self.bwe_kind}"
        return tag

    def key(self) -> dict:
        d = asdict(self)
        if self.kind == "baseline":
            d["fraction"] = None
        if self.kind != "lowpass_bwe":
            d["bwe_kind"] = None
        return d


def parse_frontend(token: str, **kw) -> FrontendConfig:
    """``kind`` or ``kind@fraction`` (optionally ``/bwe_kind`` for lowpass_bwe)."""
    token = token.strip()
    bwe_kind = None
    if "/" in token:
        token, bwe_kind = token.split("/", 1)
    kind, _, frac = token.partition("@")
    if bwe_kind:
        kw["bwe_kind"] = bwe_kind
    return FrontendConfig(kind=kind, fraction=float(frac) if frac else kw.pop("fraction", None), **kw)


def utt_index(utt_id: str) -> int:
    return zlib.crc32(utt_id.encode("utf-8"))


def feature_dim(fe: FrontendConfig, n_mels: int = 80) -> int:
    if fe.kind == "band_trim":
        return trim_index(fe.fraction, n_mels).n_low
    return n_mels


def frontend_transform(audio: AudioBuffer, fe: FrontendConfig, extender=None) -> FbankMatrix:
    """Waveform -> FBANK for one front-end (no VAD, augmentation or length norm)."""
    if fe.kind == "lowpass":
        audio = lowpass_frontend(audio, fe.fraction)
    elif fe.kind == "lowpass_bwe":
        narrow = lowpass_frontend(audio, fe.fraction)
        if extender is None:
            extender = bwe.BweExtender("replicate", fe.fraction)
        audio = bwe.extend(bwe.BweInput(narrow, fe.fraction), extender)
    feats = fbank(audio)
    if fe.kind == "band_trim":
        feats = trim_bands(feats, trim_index(fe.fraction))
    return feats


class SilentUtterance(ValueError):
    pass


def apply_vad(audio: AudioBuffer) -> AudioBuffer:
    try:
        return vad_trim(audio).trimmed
    except ValueError as exc:
        raise SilentUtterance(str(exc)) from exc


def prepare_waveform(
    utt: Utterance,
    fe: FrontendConfig,
    seed: int,
    codec: CodecProfile | None = None,
) -> AudioBuffer:
    """Channel, then VAD, then (train subset only) augmentation."""
    audio = utt.audio
    if codec is not None and utt.subset == "eval":
        audio = apply_codec(audio, codec)
    if fe.vad:
        audio = apply_vad(audio)
    if utt.subset == "train" and fe.augment is not None:
        aug_seed = fe.augment.seed ^ seed
        audio, _ = augment_audio(audio, fe.augment, sub_rng(aug_seed, utt_index(utt.id), _AUG_STREAM))
    return audio


def finish_features(feats: FbankMatrix, utt: Utterance, seed: int) -> FbankMatrix:
    if utt.subset == "train":
        return normalize_length(feats, "train", sub_rng(seed, utt_index(utt.id), _LEN_STREAM))
    return normalize_length(feats, "eval")


def featurize_utterance(utt, fe, seed, codec=None, extender=None) -> FbankMatrix:
    """Full per-utterance pipeline: channel, VAD, augment, front-end, FBANK, trim, length."""
    audio = prepare_waveform(utt, fe, seed, codec)
    return finish_features(frontend_transform(audio, fe, extender), utt, seed)


def train_extender(utts, fraction: float, vad: bool = False, max_utts: int = 200, ridge_lambda: float = 1e-3):
    """Ridge BWE regressor from clean train-subset audio (low-passed vs original)."""
    pairs = []
    for u in utts:
        if u.subset != "train":
            continue
        audio = u.audio
        if vad:
            try:
                audio = apply_vad(audio)
            except SilentUtterance:
                continue
        pairs.append((lowpass_frontend(audio, fraction), audio))
        if len(pairs) >= max_utts:
            break
    return bwe.train_linear_regressor(pairs, fraction, ridge_lambda)


def _label_ids(utts) -> np.ndarray:
    return np.array([1 if u.label == "bonafide" else 0 for u in utts], dtype=np.int64)


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Workbench: in-memory corpus plus the caches a sweep needs
# ---------------------------------------------------------------------------


class Workbench:
    def __init__(self, utts, train_cfg: TrainConfig, bwe_max_utts: int = 200):
        self.utts = list(utts)
        self.train_cfg = train_cfg
        self.bwe_max_utts = bwe_max_utts
        self.n_trained = 0
        self.n_skipped_silent = 0
        self._extenders: dict = {}
        self._eval_cache: dict = {}
        self._aug_cache: tuple | None = None
        self._vad_cache: dict = {}

    def subset(self, name: str) -> list[Utterance]:
        return [u for u in self.utts if u.subset == name]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for u in self.utts:
            h.update(f"{u.id}\t{u.label}\t{u.subset}\t".encode())
            h.update(u.audio.samples.tobytes())
        return h.hexdigest()[:16]

    def extender(self, fe: FrontendConfig):
        if fe.kind != "lowpass_bwe":
            return None
        if fe.bwe_kind == "replicate":
            return bwe.BweExtender("replicate", fe.fraction)
        key = (fe.fraction, fe.vad)
        if key not in self._extenders:
            self._extenders[key] = train_extender(self.utts, fe.fraction, fe.vad, self.bwe_max_utts)
        return self._extenders[key]

    def _vad_audio(self, utt: Utterance) -> AudioBuffer:
        if utt.id not in self._vad_cache:
            self._vad_cache[utt.id] = apply_vad(utt.audio)
        return self._vad_cache[utt.id]

    def _train_audio(self, fe: FrontendConfig, seed: int) -> list[tuple[Utterance, AudioBuffer]]:
        key = (seed, fe.vad, fe.augment)
        if self._aug_cache is not None and self._aug_cache[0] == key:
            return self._aug_cache[1]
        out = []
        for u in self.utts:
            if u.subset not in ("train", "dev"):
                continue
            try:
                audio = self._vad_audio(u) if fe.vad else u.audio
            except SilentUtterance:
                self.n_skipped_silent += 1
                continue
            if u.subset == "train" and fe.augment is not None:
                rng = sub_rng(fe.augment.seed ^ seed, utt_index(u.id), _AUG_STREAM)
                audio, _ = augment_audio(audio, fe.augment, rng)
            out.append((u, audio))
        self._aug_cache = (key, out)
        return out

    def train_features(self, fe: FrontendConfig, seed: int):
        ext = self.extender(fe)
        tr, dv = [], []
        for u, audio in self._train_audio(fe, seed):
            feats = finish_features(frontend_transform(audio, fe, ext), u, seed)
            (tr if u.subset == "train" else dv).append((u, feats.values.astype(np.float32)))
        return tr, dv

    def eval_features(self, fe: FrontendConfig, codec: CodecProfile):
        key = (fe, codec)
        if key not in self._eval_cache:
            ext = self.extender(fe)
            items = []
            for u in self.subset("eval"):
                try:
                    audio = apply_codec(u.audio, codec)
                    if fe.vad:
                        audio = apply_vad(audio)
                except SilentUtterance:
                    self.n_skipped_silent += 1
                    continue
                feats = finish_features(frontend_transform(audio, fe, ext), u, 0)
                items.append((u, feats.values.astype(np.float32)))
            self._eval_cache[key] = items
        return self._eval_cache[key]

    def drop_eval_cache(self, keep=()) -> None:
        self._eval_cache = {k: v for k, v in self._eval_cache.items() if k[0] in keep}

    def train_model(self, fe: FrontendConfig, seed: int) -> tuple[AspModel, list[EpochLog]]:
        tr, dv = self.train_features(fe, seed)
        cfg = replace(self.train_cfg, seed=seed)
        model, logs = train(
            [f for _, f in tr], _label_ids([u for u, _ in tr]), cfg,
            [f for _, f in dv] or None, _label_ids([u for u, _ in dv]) if dv else None,
        )
        self.n_trained += 1
        return model, logs

    def score_eval(self, model: AspModel, fe: FrontendConfig, codec: CodecProfile):
        items = self.eval_features(fe, codec)
        scores = score_batch(model, [f for _, f in items])
        return [(u, float(s)) for (u, _), s in zip(items, scores)]


def eer_of(scored) -> EerResult:
    bona = [s for u, s in scored if u.label == "bonafide"]
    spoof = [s for u, s in scored if u.label == "spoof"]
    return eer_from_arrays(bona, spoof)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentPlan:
    corpus: CorpusSpec | None = None
    manifest: str | None = None
    frontends: tuple[FrontendConfig, ...] = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    codecs: tuple[CodecProfile, ...] = (CodecProfile("clean"), CodecProfile("g711_mulaw"))
    train: TrainConfig = field(default_factory=TrainConfig)
    bwe_max_utts: int = 200

    def __post_init__(self):
        if not self.frontends:
            raise ValueError("plan needs at least one front-end")
        if not self.seeds:
            raise ValueError("plan needs at least one seed")
        if (self.corpus is None) == (self.manifest is None):
            raise ValueError("plan needs exactly one of corpus spec or manifest")


@dataclass(frozen=True)
class CellResult:
    frontend: str
    fraction: float | None
    codec: str
    vad: bool
    seed: int
    eer: float | None
    status: str
    key: str


def expand_frontends(tokens, fractions, **kw) -> tuple[FrontendConfig, ...]:
    """Tokens without ``@fraction`` (other than baseline) expand over ``fractions``."""
    out: list[FrontendConfig] = []
    for token in tokens:
        head, slash, bwe_kind = token.strip().partition("/")
        suffix = slash + bwe_kind
        if head == "baseline" or "@" in head:
            candidates = [parse_frontend(head + suffix, **kw)]
        else:
            candidates = [parse_frontend(f"{head}@{f:g}{suffix}", **kw) for f in fractions]
        out.extend(fe for fe in candidates if fe not in out)
    return tuple(out)


def load_plan_corpus(plan: ExperimentPlan) -> list[Utterance]:
    if plan.corpus is not None:
        return generate_corpus(plan.corpus)
    return [load_utterance(e) for e in read_manifest(plan.manifest)]


def cell_key(fingerprint: str, fe: FrontendConfig, seed: int, codec: CodecProfile, cfg: TrainConfig, bwe_max: int) -> str:
    return stable_hash(
        {"corpus": fingerprint, "frontend": fe.key(), "seed": seed, "codec": asdict(codec),
         "train": asdict(replace(cfg, seed=0)), "bwe_max_utts": bwe_max}
    )


def _run_group(workbench: Workbench, plan: ExperimentPlan, vad: bool, seed: int, done: frozenset, fp: str):
    """Train and score every pending cell of one (vad, seed) group."""
    out = []
    for fe in (f for f in plan.frontends if f.vad == vad):
        keys = {c: cell_key(fp, fe, seed, c, plan.train, plan.bwe_max_utts) for c in plan.codecs}
        todo = [c for c in plan.codecs if keys[c] not in done]
        if not todo:
            continue
        try:
            model, _ = workbench.train_model(fe, seed)
            model_err = None
        except Exception as exc:  # recorded per cell, sweep continues
            log.exception("training failed for %s seed %s", fe.label, seed)
            model, model_err = None, exc
        for c in todo:
            eer, status = None, "ok"
            if model_err is not None:
                status = f"failed: {model_err}"
            else:
                try:
                    eer = eer_of(workbench.score_eval(model, fe, c)).eer
                except Exception as exc:
                    log.exception("scoring failed for %s/%s", fe.label, c.name)
                    status = f"failed: {exc}"
            fraction = fe.fraction if fe.kind != "baseline" else None
            out.append(CellResult(fe.label, fraction, c.name, fe.vad, seed, eer, status, keys[c]))
    return out


def _run_group_job(utts, plan, vad, seed, done, fp):
    return _run_group(Workbench(utts, plan.train, plan.bwe_max_utts), plan, vad, seed, done, fp)


def run_sweep(plan: ExperimentPlan, out_dir, utts=None, workbench: Workbench | None = None, jobs: int = 1):
    """Run every (front-end, seed, codec) cell not already in ``out_dir/cells.jsonl``.

    Returns the list of CellResult in plan order. Failures are recorded with
    status "failed" and do not stop the sweep. With ``jobs > 1`` the
    (vad, seed) groups run in separate processes, each holding its own copy
    of the corpus; results do not depend on ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_path = out_dir / "cells.jsonl"
    results: dict[str, CellResult] = {}
    if runs_path.exists():
        for line in runs_path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if rec["status"] == "ok":
                    results[rec["key"]] = CellResult(**rec)
    done = frozenset(results)

    if workbench is None:
        if utts is None:
            utts = load_plan_corpus(plan)
        workbench = Workbench(utts, plan.train, plan.bwe_max_utts)
    fp = workbench.fingerprint()

    # seed-major so augmented training audio is built once per (vad, seed)
    groups = [(vad, seed) for vad in sorted({fe.vad for fe in plan.frontends}) for seed in plan.seeds]
    with open(runs_path, "a") as runs:

        def record(cells):
            for res in cells:
                results[res.key] = res
                runs.write(json.dumps(asdict(res), sort_keys=True) + "\n")
            runs.flush()

        if jobs > 1 and len(groups) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_group_job, workbench.utts, plan, v, s, done, fp) for v, s in groups]
                for fut in as_completed(futures):
                    record(fut.result())
        else:
            for vad, seed in groups:
                record(_run_group(workbench, plan, vad, seed, done, fp))
    ordered = []
    for fe in plan.frontends:
        for c in plan.codecs:
            for seed in plan.seeds:
                ordered.append(results[cell_key(fp, fe, seed, c, plan.train, plan.bwe_max_utts)])
    write_tables(ordered, plan, out_dir)
    return ordered


def averages(cells) -> list[dict]:
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        groups.setdefault((c.frontend, c.fraction, c.codec, c.vad), []).append(c)
    out = []
    for (fe, frac, codec, vad), members in groups.items():
        ok = [m.eer for m in members if m.status == "ok"]
        out.append({"frontend": fe, "fraction": frac, "codec": codec, "vad": vad,
                    "eer": sum(ok) / len(ok) if ok else None, "n": len(ok)})
    return out


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _frac(x) -> str:
    return "" if x is None else f"{x:g}"


def write_tables(cells, plan: ExperimentPlan, out_dir) -> None:
    out_dir = Path(out_dir)
    lines = ["system,frontend,fraction,codec,vad,seed,eer,status"]
    for c in cells:
        lines.append(
            f"asp,{c.frontend},{_frac(c.fraction)},{c.codec},"
            f"{'on' if c.vad else 'off'},{c.seed},{_fmt(c.eer)},{c.status.split(':')[0]}"
        )
    avgs = averages(cells)
    for a in avgs:
        lines.append(
            f"asp,{a['frontend']},{_frac(a['fraction'])},{a['codec']},"
            f"{'on' if a['vad'] else 'off'},avg,{_fmt(a['eer'])},{'ok' if a['n'] else 'failed'}"
        )
    (out_dir / "results.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "results.txt").write_text(render_table(cells, plan.seeds))


def render_table(cells, seeds) -> str:
    """Aligned text table: one block per (codec, vad), rows = front-end, EER in %."""
    blocks = []
    conditions = []
    for c in cells:
        if (c.codec, c.vad) not in conditions:
            conditions.append((c.codec, c.vad))
    for codec, vad in conditions:
        rows = {}
        for c in cells:
            if c.codec == codec and c.vad == vad:
                rows.setdefault(c.frontend, {})[c.seed] = c
        header = ["front-end"] + [f"seed{s}" for s in seeds] + ["average"]
        body = []
        for name, by_seed in rows.items():
            vals = [by_seed.get(s) for s in seeds]
            ok = [v.eer for v in vals if v is not None and v.status == "ok"]
            cells_txt = [f"{100 * v.eer:.2f}" if v is not None and v.status == "ok" else "fail" for v in vals]
            body.append([name] + cells_txt + [f"{100 * sum(ok) / len(ok):.2f}" if ok else "-"])
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        title = f"EER% codec={codec} vad={'on' if vad else 'off'}"
        fmt = lambda r: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(r, widths)))
        blocks.append("\n".join([title, fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in body]))
    return "\n\n".join(blocks) + "\n"
