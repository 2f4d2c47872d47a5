"""Separation scoring (global SDR) and the cross-instrument NLL matrix."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from flowsep.audio import AudioClip, load_wav, resample, rms_dbfs, segment_nonsilent
from flowsep.errors import ConfigError, DatasetError, ShapeError
from flowsep.flow.glow import GlowModel, log_likelihood
from flowsep.separation import SeparationConfig, _model_stft, check_stft, chunk_bounds, separate
from flowsep.spectral import StftParams, magnitude

log = logging.getLogger(__name__)

SILENCE_DB = -80.0


def global_sdr(ref: AudioClip, est: AudioClip) -> float:
    """``10 log10(sum ref^2 / sum (ref - est)^2)``; ``inf`` for a perfect estimate, ``nan`` for silent ``ref``."""
    r = np.asarray(getattr(ref, "samples", ref), dtype=np.float64)
    e = np.asarray(getattr(est, "samples", est), dtype=np.float64)
    if r.shape != e.shape:
        raise ShapeError(f"reference has {r.shape[0]} samples, estimate {e.shape[0]}")
    if hasattr(ref, "sample_rate") and hasattr(est, "sample_rate") and ref.sample_rate != est.sample_rate:
        raise ShapeError("reference and estimate sample rates differ")
    num = float(np.sum(r * r))
    if num == 0.0:
        return math.nan
    den = float(np.sum((r - e) ** 2))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def is_silent(clip: AudioClip) -> bool:
    return rms_dbfs(clip.samples) < SILENCE_DB


def robust_median(values) -> float:
    """Median of the non-NaN entries; ``+inf`` entries take part as the largest values."""
    vals = sorted(v for v in values if not math.isnan(v))
    if not vals:
        return math.nan
    n = len(vals)
    mid = n // 2
    if n % 2:
        return vals[mid]
    lo, hi = vals[mid - 1], vals[mid]
    return hi if math.isinf(hi) and hi == lo else (lo + hi) / 2.0


def format_db(v: float) -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.2f}"


@dataclass
class SDRRow:
    track: str
    segment: int
    source: str
    sdr_db: float
    excluded: bool


@dataclass
class SDRReport:
    rows: list = field(default_factory=list)

    @property
    def sources(self) -> list:
        seen = []
        for r in self.rows:
            if r.source not in seen:
                seen.append(r.source)
        return seen

    @property
    def excluded(self) -> list:
        return [(r.track, r.segment, r.source) for r in self.rows if r.excluded]

    def segment_medians(self) -> dict:
        """Per-source median over every non-excluded segment of every track."""
        return {s: robust_median([r.sdr_db for r in self.rows if r.source == s and not r.excluded])
                for s in self.sources}

    def track_medians(self) -> dict:
        """Per-source median across tracks of each track's median segment SDR."""
        out = {}
        for s in self.sources:
            tracks = []
            for t in dict.fromkeys(r.track for r in self.rows):
                vals = [r.sdr_db for r in self.rows if r.source == s and r.track == t and not r.excluded]
                if vals:
                    tracks.append(robust_median(vals))
            out[s] = robust_median(tracks)
        return out

    def infinite_count(self) -> int:
        return sum(1 for r in self.rows if not r.excluded and math.isinf(r.sdr_db))

    def write_csv(self, path, header: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["track", "segment", "source", "sdr_db", "excluded"])
            for r in self.rows:
                w.writerow([r.track, r.segment, r.source, format_db(r.sdr_db), int(r.excluded)])

    def summary_table(self) -> str:
        seg, trk = self.segment_medians(), self.track_medians()
        width = max([len("source")] + [len(s) for s in self.sources])
        lines = [f"{'source':<{width}}  {'median(seg)':>12}  {'median(track)':>13}"]
        for s in self.sources:
            lines.append(f"{s:<{width}}  {format_db(seg[s]):>12}  {format_db(trk[s]):>13}")
        return "\n".join(lines)


def load_test_manifest(path) -> list:
    """``[{"name", "mixture", "sources": {instrument: path}}]``; relative paths resolve against the file."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    tracks = raw["tracks"] if isinstance(raw, dict) else raw
    if not isinstance(tracks, list):
        raise ConfigError(f"{path}: expected a list of tracks")

    def res(p):
        return p if Path(p).is_absolute() else str((path.parent / p).resolve())

    out = []
    for i, t in enumerate(tracks):
        out.append({"name": t.get("name", f"track{i}"), "mixture": res(t["mixture"]),
                    "sources": {k: res(v) for k, v in t.get("sources", {}).items()}})
    return out


def score_segments(track: str, refs: dict, ests: dict, rate: int, segment_seconds: float) -> list:
    """SDR rows for each segment of each declared source."""
    n = len(next(iter(refs.values())))
    rows = []
    for seg, (lo, hi) in enumerate(chunk_bounds(n, rate, segment_seconds)):
        for source, ref in refs.items():
            if source not in ests:
                raise DatasetError(f"{track}: no estimate for source {source!r}")
            r = AudioClip(ref.samples[lo:hi], rate)
            e = AudioClip(ests[source].samples[lo:hi], rate)
            if is_silent(r):
                rows.append(SDRRow(track, seg, source, math.nan, True))
            else:
                rows.append(SDRRow(track, seg, source, global_sdr(r, e), False))
    return rows


def evaluate_tracks(tracks: Sequence[dict], models: Sequence[GlowModel],
                    config: SeparationConfig = SeparationConfig(), segment_seconds: float = 60.0,
                    oracle: bool = False) -> SDRReport:
    """Separate each track in ``segment_seconds`` pieces and score every declared source.

    Tracks are dicts with ``name``, ``mixture`` and ``sources`` (instrument ->
    reference); entries may be paths or :class:`AudioClip`. ``oracle=True``
    skips separation and scores the references against themselves.
    """
    if not tracks:
        raise DatasetError("no tracks to evaluate")
    labels = [m.metadata.get("instrument", f"source{i}") for i, m in enumerate(models)]
    params = _model_stft(models[0]) if models else None
    rate = params.sample_rate if params else None
    report = SDRReport()
    for t in tracks:
        if not t.get("sources"):
            raise DatasetError(f"{t['name']}: no reference stems")
        refs = {k: _clip(v, rate) for k, v in t["sources"].items()}
        rate_t = next(iter(refs.values())).sample_rate
        if oracle:
            ests = refs
        else:
            missing = [s for s in labels if s not in refs]
            if missing:
                raise DatasetError(f"{t['name']}: missing reference stem(s) {missing}")
            mix = _clip(t["mixture"], rate)
            seg_cfg = SeparationConfig(**{**config.to_dict(), "chunk_seconds": segment_seconds})
            result = separate(mix, models, seg_cfg)
            ests = {lb: st for lb, st in zip(labels, result.stems)}
            refs = {k: refs[k] for k in labels}
        report.rows.extend(score_segments(t["name"], refs, ests, rate_t, segment_seconds))
    inf = report.infinite_count()
    if inf:
        log.info("%d segment scores are +inf (perfect estimates)", inf)
    return report


def _clip(item, rate: Optional[int]) -> AudioClip:
    clip = item if isinstance(item, AudioClip) else load_wav(item)
    return resample(clip, rate) if rate else clip


@dataclass
class NLLMatrix:
    values: np.ndarray  # [n_models, n_clips], nats per dimension
    totals: np.ndarray  # [n_models, n_clips], total negative log-likelihood
    models: list
    clips: list
    categories: list

    def write_csv(self, path, header: Optional[str] = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "clip", "category", "nll_per_dim", "nll_total"])
            for i, m in enumerate(self.models):
                for j, (c, cat) in enumerate(zip(self.clips, self.categories)):
                    w.writerow([m, c, cat, repr(float(self.values[i, j])), repr(float(self.totals[i, j]))])

    def summary(self) -> list:
        """Quartiles of per-dimension NLL for every (model, category) pair."""
        rows = []
        for i, m in enumerate(self.models):
            for cat in dict.fromkeys(self.categories):
                vals = self.values[i, [j for j, c in enumerate(self.categories) if c == cat]]
                q = np.percentile(vals, [0, 25, 50, 75, 100])
                rows.append({"model": m, "category": cat, "n": int(vals.size), "min": q[0], "q1": q[1],
                             "median": q[2], "q3": q[3], "max": q[4]})
        return rows

    def write_summary(self, path, header: Optional[str] = None) -> None:
        keys = ["model", "category", "n", "min", "q1", "median", "q3", "max"]
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.summary():
                w.writerow([r[k] if k in ("model", "category", "n") else repr(float(r[k])) for k in keys])

    def median(self, model: str, category: str) -> float:
        i = self.models.index(model)
        return float(np.median(self.values[i, [j for j, c in enumerate(self.categories) if c == category]]))


def per_dim_nll(mags: np.ndarray, model: GlowModel) -> tuple:
    """``(-log p(s) / D, -log p(s))`` for one magnitude grid."""
    ll = log_likelihood(mags, model)
    return -ll / mags.size, -ll


def clip_pieces(clips_manifest: dict, params: StftParams, clip_seconds: float,
                rms_floor_db: float = SILENCE_DB) -> list:
    """``[(clip name, category, magnitude grid)]`` for every test piece.

    Files are cut into non-silent ``clip_seconds`` pieces; a file shorter than
    one piece is used whole.
    """
    pieces = []
    for category, files in clips_manifest.items():
        for idx, item in enumerate(files):
            if isinstance(item, AudioClip):
                clip, name = item, f"{category}{idx}"
            else:
                clip, name = _clip(item, params.sample_rate), Path(item).stem
            segs = segment_nonsilent(clip, clip_seconds, rms_floor_db)
            if not segs and len(clip) > 0 and not is_silent(clip):
                segs = [clip]
            for k, seg in enumerate(segs):
                mag = magnitude(seg, params).trimmed_even()
                pieces.append((f"{name}#{k}", category, mag.mags))
    if not pieces:
        raise DatasetError("no non-silent test clips")
    return pieces


def nll_matrix(models: Sequence[GlowModel], clips_manifest: dict, clip_seconds: float = 60.0) -> NLLMatrix:
    """Per-dimension NLL of every model on every test piece."""
    if not models:
        raise ConfigError("need at least one model")
    params = _model_stft(models[0])
    if params is None:
        raise ConfigError("model checkpoint has no STFT metadata")
    check_stft(models, params)
    pieces = clip_pieces(clips_manifest, params, clip_seconds)
    values = np.zeros((len(models), len(pieces)))
    totals = np.zeros_like(values)
    for i, model in enumerate(models):
        for j, (_, _, mags) in enumerate(pieces):
            values[i, j], totals[i, j] = per_dim_nll(mags, model)
    if not np.all(np.isfinite(values)):
        raise DatasetError("non-finite NLL in matrix")
    names = [m.metadata.get("instrument", f"model{i}") for i, m in enumerate(models)]
    return NLLMatrix(values, totals, names, [p[0] for p in pieces], [p[1] for p in pieces])
