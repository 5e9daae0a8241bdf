"""Deterministic signal front end: mel analysis, pitch, prosody, inversion.

Frame convention shared by every op: T = ceil(N / hop), frame t is centered
on sample t*hop, and the signal is reflect-padded so edge frames are full
width. All functions are pure; identical input gives bit-identical output.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window, resample_poly

from .errors import InvalidInputError

TARGET_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray            # float64 in [-1, 1]
    sample_rate: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InvalidInputError("waveform must be mono (1-D)")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    values: np.ndarray             # (T, n_mels), natural-log domain
    hop_s: float = 0.0125
    window_s: float = 0.050

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class ProsodyTrack:
    lf0: np.ndarray                # (T,) log-Hz, interpolated through unvoiced
    vuv: np.ndarray                # (T,) {0, 1}
    energy: np.ndarray             # (T,) >= 0
    normalized: bool = False
    lf0_fallback: bool = False     # set when the utterance was fully unvoiced

    @property
    def num_frames(self) -> int:
        return len(self.lf0)


@dataclass
class FrameParams:
    sample_rate: int = 16000
    win_length: int = 800
    hop_length: int = 200
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 50.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45
    _window: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def from_config(cls, sig) -> "FrameParams":
        return cls(sample_rate=sig.sample_rate, win_length=sig.win_length,
                   hop_length=sig.hop_length, n_fft=sig.n_fft, n_mels=sig.n_mels,
                   fmin=sig.fmin, fmax=sig.fmax, log_floor=sig.log_floor,
                   f0_min=sig.f0_min, f0_max=sig.f0_max,
                   voicing_threshold=sig.voicing_threshold)

    @property
    def window(self) -> np.ndarray:
        if self._window is None:
            object.__setattr__(self, "_window",
                               get_window("hann", self.win_length, fftbins=True))
        return self._window


DEFAULT_PARAMS = FrameParams()


def num_frames(n_samples: int, params: FrameParams = DEFAULT_PARAMS) -> int:
    return int(np.ceil(n_samples / params.hop_length))


def _check_waveform(w: Waveform, params: FrameParams) -> np.ndarray:
    x = np.asarray(w.samples, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("empty waveform")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("waveform contains non-finite samples")
    if x.size < params.win_length:
        raise InvalidInputError(
            f"waveform has {x.size} samples, below one analysis window "
            f"({params.win_length})")
    return x


def frame_signal(x: np.ndarray, params: FrameParams = DEFAULT_PARAMS,
                 pad_mode: str = "reflect") -> np.ndarray:
    """Slice a signal into (T, win_length) center-aligned frames.

    Spectral ops pad with zeros (a reflected edge puts a kink under the
    window peak and smears edge-frame spectra); amplitude-based ops pad by
    reflection so edge frames keep the signal's level.
    """
    win, hop = params.win_length, params.hop_length
    T = num_frames(len(x), params)
    pad_left = win // 2
    pad_right = max(0, (T - 1) * hop + win - len(x) - pad_left)
    padded = np.pad(x, (pad_left, pad_right), mode=pad_mode)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    return padded[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_bin_centers(params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Center frequency (Hz) of each triangular filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax),
                                params.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """(n_mels, n_fft//2 + 1) triangular filters on the HTK mel scale."""
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax),
                                params.n_mels + 2))
    freqs = np.arange(params.n_fft // 2 + 1) * params.sample_rate / params.n_fft
    fb = np.zeros((params.n_mels, len(freqs)))
    for i in range(params.n_mels):
        lo, center, hi = pts[i], pts[i + 1], pts[i + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def stft(x: np.ndarray, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """(T, n_fft//2 + 1) complex spectra under the shared frame convention."""
    frames = frame_signal(x, params, pad_mode="constant")
    return np.fft.rfft(frames * params.window[None, :], n=params.n_fft, axis=1)


def istft(spec: np.ndarray, params: FrameParams = DEFAULT_PARAMS) -> np.ndarray:
    """Least-squares overlap-add inverse of `stft`; output length T * hop."""
    win, hop = params.win_length, params.hop_length
    T = spec.shape[0]
    frames = np.fft.irfft(spec, n=params.n_fft, axis=1)[:, :win]
    length = (T - 1) * hop + win
    acc = np.zeros(length)
    norm = np.zeros(length)
    w = params.window
    for t in range(T):
        acc[t * hop:t * hop + win] += frames[t] * w
        norm[t * hop:t * hop + win] += w * w
    acc /= np.maximum(norm, 1e-10)
    start = win // 2
    return acc[start:start + T * hop]


def compute_mel(w: Waveform, params: FrameParams = DEFAULT_PARAMS) -> MelSpectrogram:
    """Log-mel spectrogram, (T, n_mels), natural log with an absolute floor."""
    x = _check_waveform(w, params)
    power = np.abs(stft(x, params)) ** 2
    mel_power = power @ mel_filterbank(params).T
    values = np.log(np.maximum(mel_power, params.log_floor))
    return MelSpectrogram(values=values,
                          hop_s=params.hop_length / params.sample_rate,
                          window_s=params.win_length / params.sample_rate)


def extract_f0(w: Waveform, params: FrameParams = DEFAULT_PARAMS):
    """Frame-wise f0 (Hz) and voicing via normalized autocorrelation.

    Per frame: global-max autocorrelation peak with a guarded preference for
    near-equal sub-multiple lags (anti period-doubling). A repair pass then
    re-picks frames that disagree with their voiced neighborhood by a
    rational factor, and a short median smooths isolated flips.
    """
    x = _check_waveform(w, params)
    frames = frame_signal(x, params)
    W = params.win_length
    lag_min = int(np.floor(params.sample_rate / params.f0_max))
    lag_max = int(np.ceil(params.sample_rate / params.f0_min))
    lag_max = min(lag_max, W - 2)

    nfft = int(2 ** np.ceil(np.log2(2 * W)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    raw = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, :W]

    sq = frames ** 2
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(sq, axis=1)], axis=1)
    total = csum[:, -1]
    lags = np.arange(W)
    e_head = np.take_along_axis(csum, (W - lags)[None, :].repeat(frames.shape[0], 0), axis=1)
    e_tail = total[:, None] - np.take_along_axis(csum, lags[None, :].repeat(frames.shape[0], 0), axis=1)
    denom = np.sqrt(np.maximum(e_head * e_tail, 1e-20))
    r = np.where(denom > 0, raw / denom, 0.0)

    def refine(seg, lag):
        if lag_min < lag < lag_max:
            a, b, c = seg[lag - 1], seg[lag], seg[lag + 1]
            denom2 = a - 2 * b + c
            if abs(denom2) > 1e-12:
                return lag + float(np.clip(0.5 * (a - c) / denom2, -0.5, 0.5))
        return float(lag)

    T = frames.shape[0]
    f0 = np.zeros(T)
    vuv = np.zeros(T)
    rms = np.sqrt(np.mean(sq, axis=1))
    for t in range(T):
        if rms[t] < 1e-5:
            continue
        seg = r[t]
        window = seg[lag_min:lag_max + 1]
        peak_val = window.max()
        if peak_val < params.voicing_threshold:
            continue
        lag = lag_min + int(np.argmax(window))
        for k in (4, 3, 2):
            cand = int(round(lag / k))
            if cand < lag_min:
                continue
            span = seg[max(cand - 1, 1):cand + 2]
            if span.max() >= 0.93 * peak_val:
                lag = max(cand - 1, 1) + int(np.argmax(span))
                break
        f0[t] = params.sample_rate / refine(seg, lag)
        vuv[t] = 1.0

    f0 = _repair_rational_flips(f0, vuv, r, rms, lag_min, lag_max, params, refine)
    return _median_smooth_voiced(f0, vuv), vuv


def _repair_rational_flips(f0, vuv, r, rms, lag_min, lag_max, params, refine):
    """Re-pick frames whose f0 sits a rational factor off the voiced median.

    Formant-harmonic collisions can eclipse the true period over a whole
    pseudo-phoneme; when a frame disagrees with the utterance's voiced
    median by more than 25%, any acceptable peak near the median-consistent
    lag wins instead.
    """
    voiced = vuv > 0.5
    if voiced.sum() < 5:
        return f0
    idx = np.flatnonzero(voiced)
    out = f0.copy()
    half = 32   # local reference window: wide enough to outvote one bad unit
    for t in idx:
        near = idx[(idx >= t - half) & (idx <= t + half)]
        center = np.median(f0[near])
        ratio = f0[t] / center
        if 0.75 < ratio < 1.3:
            continue
        seg = r[t]
        # local search around the lag that would agree with the median,
        # scaled by the frame's own deviation pattern (half/double/3:2)
        best = None
        for factor in (1.0, 0.5, 2.0, 2 / 3, 1.5, 3.0, 1 / 3):
            cand = int(round(params.sample_rate / (center * factor)))
            if not lag_min <= cand <= lag_max:
                continue
            span_lo = max(cand - 2, 1)
            span = seg[span_lo:cand + 3]
            peak = float(span.max())
            if peak < params.voicing_threshold:
                continue
            # prefer candidates close to the median contour, then by peak
            penalty = abs(np.log(factor))
            score = peak - 0.35 * penalty
            if best is None or score > best[0]:
                best = (score, span_lo + int(np.argmax(span)))
        if best is not None:
            out[t] = params.sample_rate / refine(seg, best[1])
    return out


def _median_smooth_voiced(f0: np.ndarray, vuv: np.ndarray,
                          width: int = 5) -> np.ndarray:
    """5-point median over voiced runs; kills isolated formant/octave locks."""
    out = f0.copy()
    voiced = np.flatnonzero(vuv > 0.5)
    if voiced.size == 0:
        return out
    runs = np.split(voiced, np.flatnonzero(np.diff(voiced) > 1) + 1)
    half = width // 2
    for run in runs:
        vals = f0[run]
        if len(vals) < 3:
            continue
        smoothed = vals.copy()
        for i in range(len(vals)):
            lo = max(0, i - half)
            smoothed[i] = np.median(vals[lo:i + half + 1])
        out[run] = smoothed
    return out


def make_prosody(f0: np.ndarray, vuv: np.ndarray, w: Waveform,
                 params: FrameParams = DEFAULT_PARAMS) -> ProsodyTrack:
    """Unnormalized prosody trio: interpolated lf0, voicing, windowed mean |x|."""
    f0 = np.asarray(f0, dtype=np.float64)
    vuv = np.asarray(vuv, dtype=np.float64)
    x = _check_waveform(w, params)
    T = num_frames(len(x), params)
    if len(f0) != T or len(vuv) != T:
        raise InvalidInputError(
            f"f0/vuv length {len(f0)}/{len(vuv)} does not match frame count {T}")

    voiced = np.flatnonzero(vuv > 0.5)
    fallback = False
    if voiced.size == 0:
        lf0 = np.full(T, np.log(100.0))
        fallback = True
    else:
        lf0 = np.interp(np.arange(T), voiced, np.log(f0[voiced]))

    energy = np.mean(np.abs(frame_signal(x, params)), axis=1)
    return ProsodyTrack(lf0=lf0, vuv=(vuv > 0.5).astype(np.float64),
                        energy=energy, normalized=False, lf0_fallback=fallback)


def minmax_normalize(track: np.ndarray) -> np.ndarray:
    """Map a track to [0, 1]; a constant track maps to all 0.5."""
    x = np.asarray(track, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("track contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def normalize_prosody(track: ProsodyTrack) -> ProsodyTrack:
    """Utterance-level min-max normalization of lf0 and energy."""
    return ProsodyTrack(lf0=minmax_normalize(track.lf0), vuv=track.vuv.copy(),
                        energy=minmax_normalize(track.energy), normalized=True,
                        lf0_fallback=track.lf0_fallback)


def invert_mel(m: MelSpectrogram, iters: int = 60,
               params: FrameParams = DEFAULT_PARAMS) -> Waveform:
    """Iterative phase reconstruction from a log-mel spectrogram.

    The mel floor added at analysis time is subtracted back out, so a
    floor-valued spectrogram inverts to silence.
    """
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    fb = mel_filterbank(params)
    pinv = np.linalg.pinv(fb)
    mel_power = np.maximum(np.exp(np.asarray(m.values, dtype=np.float64))
                           - params.log_floor, 0.0)
    lin_power = np.clip(mel_power @ pinv.T, 0.0, None)
    mag = np.sqrt(lin_power)

    spec = mag.astype(np.complex128)   # zero initial phase
    x = istft(spec, params)
    for _ in range(iters - 1):
        ang = np.angle(stft(x, params))
        x = istft(mag * np.exp(1j * ang), params)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x * (0.99 / peak)
    return Waveform(samples=x, sample_rate=params.sample_rate)


def load_wav(path) -> Waveform:
    """Read 16-bit PCM mono RIFF/WAVE and resample to 16 kHz if needed."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected 16-bit PCM")
        if fh.getnchannels() != 1:
            raise InvalidInputError(f"{path}: expected mono audio")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != TARGET_SAMPLE_RATE:
        x = resample_poly(x, TARGET_SAMPLE_RATE, rate)
        rate = TARGET_SAMPLE_RATE
    return Waveform(samples=x, sample_rate=rate)


def save_wav(path, w: Waveform) -> None:
    x = np.asarray(w.samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
