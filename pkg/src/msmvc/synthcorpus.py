"""Procedural speech-like corpus with independently controlled factors.

Content (pseudo-phoneme scripts), speaker (formant ratios, register,
bandwidths) and style (f0/energy contour families) are sampled
independently, so downstream disentanglement claims can be checked against
ground truth. Synthesis is source-filter: a sawtooth/noise excitation driven
by the commanded f0 contour, shaped by three time-varying resonators.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import lfilter

from .config import VERSION, canonical_json
from .errors import InvalidInputError
from .signal import FrameParams, DEFAULT_PARAMS, Waveform, num_frames, save_wav

N_UNITS = 24
UNIT_DURATION_RANGE = (0.08, 0.35)   # hard validity bounds for scripts
_GEN_DURATION_RANGE = (0.14, 0.32)   # generator samples inside these
_GEN_UNIT_COUNT = (6, 9)

# 20 voiced units on an F1 x F2 grid plus 4 noise-excited units. The grid
# spacing is wide relative to the speaker formant-ratio spread so units stay
# acoustically separable for every speaker.
_F1_GRID = (300.0, 480.0, 660.0, 840.0)
_F2_GRID = (900.0, 1300.0, 1750.0, 2200.0, 2600.0)
_F3_GRID = (2700.0, 2875.0, 3050.0, 3225.0, 3400.0)
_NOISE_UNITS = (
    (1200.0, 2400.0, 3600.0),
    (1600.0, 2800.0, 4000.0),
    (900.0, 2000.0, 3200.0),
    (1400.0, 3100.0, 4400.0),
)
_SPEAKER_FORMANT_REF = (500.0, 1500.0, 2500.0)


def unit_table():
    """(formants, voiced) for each of the 24 pseudo-phoneme units."""
    units = []
    for i1, f1 in enumerate(_F1_GRID):
        for i2, f2 in enumerate(_F2_GRID):
            units.append(((f1, f2, _F3_GRID[(i1 + i2) % 5]), True))
    for formants in _NOISE_UNITS:
        units.append((formants, False))
    return units


_UNITS = unit_table()


@dataclass
class SyntheticSpeaker:
    id: str
    formant_set: tuple       # 3 center frequencies, Hz, strictly increasing
    f0_register: float       # Hz
    bandwidths: tuple        # 3 values, Hz

    def __post_init__(self):
        f = self.formant_set
        if not (f[0] < f[1] < f[2]):
            raise InvalidInputError(f"speaker {self.id}: formants must increase")
        if not 80.0 <= self.f0_register <= 320.0:
            raise InvalidInputError(f"speaker {self.id}: register out of [80, 320]")

    @classmethod
    def from_id(cls, speaker_id: str) -> "SyntheticSpeaker":
        """Deterministic parameters from the id.

        Ids carrying a trailing integer (spk00, spk01, ...) get
        low-discrepancy placement of register and formant ratios so any
        generated speaker set stays well separated; other ids fall back to
        pure hash draws.
        """
        rng = np.random.default_rng(zlib.crc32(speaker_id.encode("utf-8")))
        match = re.fullmatch(r".*?(\d+)", speaker_id)
        if match:
            k = int(match.group(1))

            def strata(mult, lo, hi, jitter=0.05):
                base = (0.5 + k * mult) % 1.0
                value = lo + (hi - lo) * base \
                    + (hi - lo) * rng.uniform(-jitter, jitter)
                return float(np.clip(value, lo, hi))

            register = strata(0.6180339887498949, 90.0, 310.0)
            ratios = (strata(0.4142135623730951, 0.82, 1.18),
                      strata(0.2360679774997897, 0.82, 1.18),
                      strata(0.7548776662466927, 0.82, 1.18))
        else:
            ratios = tuple(rng.uniform(0.82, 1.18, size=3))
            register = float(rng.uniform(90.0, 310.0))
        formants = tuple(r * ref for r, ref in zip(ratios, _SPEAKER_FORMANT_REF))
        bands = (float(rng.uniform(45.0, 150.0)), float(rng.uniform(60.0, 220.0)),
                 float(rng.uniform(90.0, 320.0)))
        return cls(id=speaker_id, formant_set=formants, f0_register=register,
                   bandwidths=bands)

    def formant_ratios(self):
        return tuple(f / ref for f, ref in zip(self.formant_set, _SPEAKER_FORMANT_REF))


@dataclass
class StyleFamily:
    name: str
    f0_shape: callable       # (t_norm, t_sec) -> positive multiplier
    energy_shape: callable   # (t_norm, t_sec) -> positive envelope


def _style_registry():
    # every family keeps visible f0 AND energy movement: the corpus stands in
    # for highly expressive speech, and near-constant contours would make
    # correlation-based style metrics degenerate
    def flat_f0(tn, ts):
        return 1.0 + 0.07 * np.sin(np.pi * tn)   # gentle rise-fall arc

    def flat_en(tn, ts):
        return 0.62 + 0.10 * np.sin(np.pi * tn)

    def decl_f0(tn, ts):
        return 1.16 - 0.30 * tn

    def decl_en(tn, ts):
        return 0.80 - 0.32 * tn

    def rise_f0(tn, ts):
        return 0.86 + 0.30 * tn

    def rise_en(tn, ts):
        return 0.48 + 0.32 * tn

    def vib_f0(tn, ts):
        return 1.0 + 0.08 * np.sin(2 * np.pi * 4.5 * ts)

    def vib_en(tn, ts):
        return 0.62 + 0.12 * np.sin(2 * np.pi * 1.3 * ts)

    def stress_f0(tn, ts):
        return 1.0 + 0.18 * np.clip(np.sin(2 * np.pi * 1.7 * ts), 0.0, None) ** 2

    def stress_en(tn, ts):
        return 0.35 + 0.55 * np.abs(np.sin(2 * np.pi * 1.1 * ts + 0.4)) ** 2

    return {
        "flat": StyleFamily("flat", flat_f0, flat_en),
        "declination": StyleFamily("declination", decl_f0, decl_en),
        "rising": StyleFamily("rising", rise_f0, rise_en),
        "vibrato": StyleFamily("vibrato", vib_f0, vib_en),
        "stressed": StyleFamily("stressed", stress_f0, stress_en),
    }


STYLES = _style_registry()
STYLE_NAMES = tuple(sorted(STYLES))


@dataclass
class ContentScript:
    unit_ids: list
    unit_durations: list      # seconds per unit

    def __post_init__(self):
        if len(self.unit_ids) == 0:
            raise InvalidInputError("zero-length script")
        if len(self.unit_ids) != len(self.unit_durations):
            raise InvalidInputError("unit_ids and unit_durations disagree on length")
        lo, hi = UNIT_DURATION_RANGE
        for u, d in zip(self.unit_ids, self.unit_durations):
            if not 0 <= int(u) < N_UNITS:
                raise InvalidInputError(f"unit id {u} outside the {N_UNITS}-unit inventory")
            if not lo <= d <= hi:
                raise InvalidInputError(f"unit duration {d} outside [{lo}, {hi}] s")

    def to_dict(self):
        return {"unit_ids": [int(u) for u in self.unit_ids],
                "unit_durations": [float(d) for d in self.unit_durations]}

    @classmethod
    def from_dict(cls, data) -> "ContentScript":
        return cls(unit_ids=list(data["unit_ids"]),
                   unit_durations=list(data["unit_durations"]))

    @classmethod
    def random(cls, rng: np.random.Generator) -> "ContentScript":
        n = int(rng.integers(_GEN_UNIT_COUNT[0], _GEN_UNIT_COUNT[1] + 1))
        ids = rng.integers(0, N_UNITS, size=n).tolist()
        durs = rng.uniform(*_GEN_DURATION_RANGE, size=n).round(4).tolist()
        return cls(unit_ids=ids, unit_durations=durs)


@dataclass
class Utterance:
    waveform: Waveform
    speaker: str
    style: str = None
    meta: dict = field(default_factory=dict)


def _unit_boundaries(script: ContentScript, fs: int):
    counts = [int(round(d * fs)) for d in script.unit_durations]
    edges = np.concatenate([[0], np.cumsum(counts)])
    return counts, edges


def _per_sample_unit(script: ContentScript, fs: int):
    counts, edges = _unit_boundaries(script, fs)
    n = int(edges[-1])
    unit_of = np.zeros(n, dtype=np.int64)
    for k, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        unit_of[a:b] = script.unit_ids[k]
    return unit_of, n


def f0_contour(script: ContentScript, spk: SyntheticSpeaker, style: StyleFamily,
               seed: int, fs: int = 16000):
    """Per-sample commanded f0 (Hz) and the voiced mask. Speaker enters only
    through the register, so contours share their shape across speakers."""
    unit_of, n = _per_sample_unit(script, fs)
    if n == 0:
        raise InvalidInputError("script synthesizes to zero samples")
    t_sec = np.arange(n) / fs
    t_norm = t_sec * (fs / n)
    shape = np.asarray(style.f0_shape(t_norm, t_sec), dtype=np.float64)

    rng = np.random.default_rng((int(seed) & 0x7FFFFFFF, 1))
    knots = rng.normal(0.0, 0.012, size=n // 1600 + 2).cumsum()
    knots = np.clip(knots - knots.mean(), -0.04, 0.04)
    jitter = np.exp(np.interp(np.arange(n), np.linspace(0, n - 1, len(knots)), knots))

    f0 = spk.f0_register * shape * jitter
    voiced = np.array([_UNITS[u][1] for u in unit_of], dtype=np.float64)
    return f0, voiced


def commanded_frame_lf0(script: ContentScript, spk: SyntheticSpeaker,
                        style: StyleFamily, seed: int,
                        params: FrameParams = DEFAULT_PARAMS):
    """Frame-rate ground truth: (lf0, voiced) sampled at frame centers."""
    f0, voiced = f0_contour(script, spk, style, seed, params.sample_rate)
    T = num_frames(len(f0), params)
    centers = np.minimum(np.arange(T) * params.hop_length, len(f0) - 1)
    return np.log(f0[centers]), voiced[centers]


def _resonator_coeffs(freq: float, bw: float, fs: int):
    # two-pole resonator normalized at DC, so bandwidth also sets the peak
    # height; the cascade's tilt then carries speaker voice quality
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum(), 0.0, 0.0]), a


def synthesize(script: ContentScript, spk: SyntheticSpeaker, style: StyleFamily,
               seed: int, params: FrameParams = DEFAULT_PARAMS) -> Utterance:
    """Render one utterance; deterministic for a fixed (script, spk, style, seed)."""
    fs = params.sample_rate
    unit_of, n = _per_sample_unit(script, fs)
    t_sec = np.arange(n) / fs
    t_norm = t_sec * (fs / n)

    f0, voiced = f0_contour(script, spk, style, seed, fs)
    phase = np.cumsum(f0 / fs)
    saw = 2.0 * (phase - np.floor(phase)) - 1.0

    rng_noise = np.random.default_rng((int(seed) & 0x7FFFFFFF, 2))
    noise = rng_noise.standard_normal(n)
    voiced_ramp = uniform_filter1d(voiced, size=int(0.005 * fs) | 1, mode="nearest")
    excitation = saw * voiced_ramp + 0.35 * noise * (1.0 - voiced_ramp) \
        + 0.004 * noise

    # per-sample formant targets, smoothed into 20 ms transitions
    ratios = spk.formant_ratios()
    unit_f = np.array([_UNITS[u][0] for u in range(N_UNITS)])
    unit_voiced = np.array([1.0 if _UNITS[u][1] else 0.0 for u in range(N_UNITS)])
    targets = unit_f[unit_of] * np.asarray(ratios)[None, :]
    bw_scale = np.where(unit_voiced[unit_of] > 0.5, 1.0, 3.0)
    smooth = int(0.020 * fs) | 1
    contour = uniform_filter1d(targets, size=smooth, axis=0, mode="nearest")
    bw_contour = uniform_filter1d(bw_scale, size=smooth, mode="nearest")

    hop = params.hop_length
    y = excitation
    for k in range(3):
        out = np.empty_like(y)
        zi = np.zeros(2)
        for start in range(0, n, hop):
            stop = min(start + hop, n)
            mid = (start + stop) // 2
            b, a = _resonator_coeffs(contour[mid, k],
                                     spk.bandwidths[k] * bw_contour[mid], fs)
            out[start:stop], zi = lfilter(b, a, y[start:stop], zi=zi)
        y = out

    rng_gain = np.random.default_rng((int(seed) & 0x7FFFFFFF, 3))
    accents = rng_gain.uniform(0.92, 1.08, size=len(script.unit_ids))
    accent = uniform_filter1d(accents[np.searchsorted(
        _unit_boundaries(script, fs)[1][1:-1], np.arange(n), side="right")],
        size=smooth, mode="nearest")
    env = np.asarray(style.energy_shape(t_norm, t_sec), dtype=np.float64) * accent
    # impose the commanded envelope on the filtered signal: the cascade's
    # speaker-dependent gains must not bleed into the energy factor, or
    # energy contours stop being transferable across speakers
    rms = np.sqrt(uniform_filter1d(y * y, size=int(0.025 * fs) | 1,
                                   mode="nearest"))
    y = y / np.maximum(rms, 1e-4 * np.max(rms)) * env
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (0.6 / peak)

    return Utterance(waveform=Waveform(samples=y, sample_rate=fs), speaker=spk.id,
                     style=style.name,
                     meta={"script": script.to_dict(), "seed": int(seed)})


def frame_unit_labels(script: ContentScript, n_frames: int,
                      params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Pseudo-phoneme id active at each frame center."""
    _, edges = _unit_boundaries(script, params.sample_rate)
    centers = np.arange(n_frames) * params.hop_length
    idx = np.clip(np.searchsorted(edges[1:-1], centers, side="right"),
                  0, len(script.unit_ids) - 1)
    return np.asarray(script.unit_ids, dtype=np.int64)[idx]


def utterance_seed(corpus_seed: int, speaker_idx: int, utt_idx: int) -> int:
    key = f"{corpus_seed}:{speaker_idx}:{utt_idx}".encode("ascii")
    return zlib.crc32(key) & 0x7FFFFFFF


@dataclass
class Manifest:
    path: Path
    rows: list

    def wav_path(self, row: dict) -> Path:
        return self.path.parent / row["path"]

    def split(self, name: str) -> list:
        return [r for r in self.rows if r["split"] == name]

    def speakers(self) -> list:
        return sorted({r["speaker"] for r in self.rows})

    @property
    def utt_ids(self):
        return [utt_id(r) for r in self.rows]


def utt_id(row: dict) -> str:
    return Path(row["path"]).stem


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"no manifest at {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return Manifest(path=path, rows=rows)


def build_corpus(n_speakers: int, n_utts_per_speaker: int, out_dir, seed: int,
                 params: FrameParams = DEFAULT_PARAMS,
                 test_fraction: float = 0.2) -> Manifest:
    """Write WAVs plus a JSON-lines manifest; byte-identical for a fixed seed."""
    if n_speakers < 2:
        raise InvalidInputError("need at least 2 speakers")
    if n_utts_per_speaker < 1:
        raise InvalidInputError("need at least 1 utterance per speaker")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    try:
        wav_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    speakers = [SyntheticSpeaker.from_id(f"spk{i:02d}") for i in range(n_speakers)]
    n_test = int(round(n_utts_per_speaker * test_fraction))
    rows = []
    for s_idx, spk in enumerate(speakers):
        for u_idx in range(n_utts_per_speaker):
            style_name = STYLE_NAMES[u_idx % len(STYLE_NAMES)]
            rng = np.random.default_rng((seed, s_idx, u_idx, 7))
            script = ContentScript.random(rng)
            utt = synthesize(script, spk, STYLES[style_name],
                             utterance_seed(seed, s_idx, u_idx), params)
            rel = f"wav/{spk.id}_u{u_idx:03d}_{style_name}.wav"
            save_wav(out_dir / rel, utt.waveform)
            rows.append({
                "path": rel,
                "speaker": spk.id,
                "style": style_name,
                "script": script.to_dict(),
                "split": "test" if u_idx >= n_utts_per_speaker - n_test else "train",
                "duration_s": round(utt.waveform.duration_s, 6),
            })

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    meta = {
        "seed": int(seed),
        "n_speakers": n_speakers,
        "n_utts_per_speaker": n_utts_per_speaker,
        "version": VERSION,
        "speakers": {s.id: {"formant_set": list(s.formant_set),
                            "f0_register": s.f0_register,
                            "bandwidths": list(s.bandwidths)} for s in speakers},
    }
    (out_dir / "corpus_meta.json").write_text(canonical_json(meta) + "\n",
                                              encoding="utf-8")
    return Manifest(path=manifest_path, rows=rows)
