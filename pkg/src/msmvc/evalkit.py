"""Objective evaluation: prosody correlation, speaker similarity, ablations.

f0 of converted speech is measured after a phase-reconstruction round trip
(pitch is a waveform property); energy is read directly from the mel to
avoid the inversion confound. Frames unvoiced in either signal are masked
out of the lf0 correlation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ABLATION_VARIANTS, canonical_json
from .convnet import convert
from .errors import InvalidInputError, NotReadyError, UndefinedCorrelationError
from .features import FeatureCache
from .signal import FrameParams, MelSpectrogram, extract_f0, invert_mel
from .synthcorpus import utt_id


def pearson(x, y) -> float:
    """Sample Pearson correlation; undefined when either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("pearson expects two equal-length 1-D sequences")
    if len(x) < 2:
        raise InvalidInputError("pearson needs at least 2 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("pearson inputs must be finite")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0.0:
        raise UndefinedCorrelationError(
            "correlation undefined for constant input")
    return float(np.sum(xc * yc) / denom)


def mel_energy(mel_values: np.ndarray) -> np.ndarray:
    """Per-frame log-total-power energy contour read from a log-mel matrix.

    Log domain (dB-like) keeps the correlation from being dominated by
    residual error in the few loudest bins.
    """
    values = np.asarray(mel_values, dtype=np.float64)
    peak = values.max(axis=1, keepdims=True)
    return peak[:, 0] + np.log(np.sum(np.exp(values - peak), axis=1))


def _embed(probe, mel_norm: np.ndarray) -> np.ndarray:
    if not getattr(probe, "trained", False):
        raise NotReadyError("speaker probe has not been trained")
    with torch.no_grad():
        feats = probe(torch.from_numpy(
            mel_norm.astype(np.float32)).unsqueeze(0))
    return feats.high.squeeze(0).numpy().astype(np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine undefined for zero embeddings")
    return float(np.dot(a, b) / (na * nb))


def speaker_similarity(a: MelSpectrogram, b: MelSpectrogram, probe,
                       mel_stats) -> float:
    """Cosine similarity of probe embeddings of two mel spectrograms."""
    mean, std = mel_stats
    ea = _embed(probe, (np.asarray(a.values) - mean) / std)
    eb = _embed(probe, (np.asarray(b.values) - mean) / std)
    return _cosine(ea, eb)


def speaker_centroid(probe, cache: FeatureCache, rows, speaker: str,
                     mel_stats) -> np.ndarray:
    """Mean unit-norm probe embedding of a speaker's real utterances."""
    mean, std = mel_stats
    embs = []
    for row in rows:
        if row["speaker"] != speaker:
            continue
        mel = cache.load_signal(utt_id(row))[0]["mel"].astype(np.float64)
        e = _embed(probe, (mel - mean) / std)
        embs.append(e / np.linalg.norm(e))
    if not embs:
        raise InvalidInputError(f"no utterances for speaker {speaker!r}")
    return np.mean(embs, axis=0)


@dataclass
class EvalReport:
    pearson_lf0: float = None
    pearson_energy: float = None
    speaker_cosine: float = None
    speaker_probe_accuracy: float = None
    n_utterances: int = 0
    skipped: dict = field(default_factory=dict)
    per_utterance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pearson_lf0": self.pearson_lf0,
                "pearson_energy": self.pearson_energy,
                "speaker_cosine": self.speaker_cosine,
                "speaker_probe_accuracy": self.speaker_probe_accuracy,
                "n_utterances": self.n_utterances,
                "skipped": self.skipped}


def evaluate_conversion(model, cache: FeatureCache, test_rows, target_speaker,
                        probe, mel_stats, params: FrameParams,
                        gl_iters: int = 32, centroid_rows=None) -> EvalReport:
    """Convert every test utterance to the target speaker and re-analyze."""
    rows = [r for r in test_rows if r["speaker"] != target_speaker]
    if not rows:
        raise InvalidInputError("no test utterances outside the target speaker")
    mean, std = mel_stats
    centroid = speaker_centroid(probe, cache, centroid_rows or test_rows,
                                target_speaker, mel_stats)
    target_idx = model.speaker_index(target_speaker)

    lf0_vals, en_vals, cos_vals, hits = [], [], [], []
    skipped = {}
    per_utt = []
    for row in rows:
        uid = utt_id(row)
        bundle = cache.load_bundle(uid)
        mel_hat = convert(model, bundle, target_speaker, mel_stats)

        entry = {"utt_id": uid}
        wav_hat = invert_mel(mel_hat, gl_iters, params)
        f0_hat, vuv_hat = extract_f0(wav_hat, params)
        T = min(len(f0_hat), bundle.num_frames)
        mask = (vuv_hat[:T] > 0.5) & (bundle.vuv[:T] > 0.5)
        try:
            if mask.sum() < 2:
                raise UndefinedCorrelationError("fewer than 2 jointly voiced frames")
            r_lf0 = pearson(bundle.lf0[:T][mask], np.log(f0_hat[:T][mask]))
            lf0_vals.append(r_lf0)
            entry["pearson_lf0"] = r_lf0
        except UndefinedCorrelationError as exc:
            skipped.setdefault("lf0", []).append(f"{uid}: {exc}")

        try:
            r_en = pearson(mel_energy(bundle.mel), mel_energy(mel_hat.values))
            en_vals.append(r_en)
            entry["pearson_energy"] = r_en
        except UndefinedCorrelationError as exc:
            skipped.setdefault("energy", []).append(f"{uid}: {exc}")

        emb = _embed(probe, (mel_hat.values - mean) / std)
        cos = _cosine(emb / np.linalg.norm(emb), centroid)
        cos_vals.append(cos)
        entry["cosine"] = cos
        with torch.no_grad():
            logits = probe(torch.from_numpy(
                ((mel_hat.values - mean) / std).astype(np.float32)
            ).unsqueeze(0)).logits
        hits.append(int(logits.argmax(dim=1).item() == target_idx))
        per_utt.append(entry)

    report = EvalReport(n_utterances=len(rows), skipped=skipped,
                        per_utterance=per_utt)
    if lf0_vals:
        report.pearson_lf0 = float(np.mean(lf0_vals))
    else:
        skipped.setdefault("lf0", []).append("no valid utterances")
    if en_vals:
        report.pearson_energy = float(np.mean(en_vals))
    if cos_vals:
        report.speaker_cosine = float(np.mean(cos_vals))
        report.speaker_probe_accuracy = float(np.mean(hits))
    return report


def write_report(report: EvalReport, json_path, csv_path=None) -> None:
    Path(json_path).write_text(canonical_json(report.to_dict()) + "\n",
                               encoding="utf-8")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["utt_id", "pearson_lf0",
                                                    "pearson_energy", "cosine"])
            writer.writeheader()
            for entry in report.per_utterance:
                writer.writerow({k: entry.get(k, "") for k in writer.fieldnames})


def format_table(rows: dict) -> str:
    """Aligned-column text table; `rows` maps variant -> EvalReport | None."""
    headers = ["variant", "pearson_lf0", "pearson_energy", "speaker_cosine",
               "probe_acc", "n"]
    lines = []
    for name, rep in rows.items():
        if rep is None:
            lines.append([name, "absent", "-", "-", "-", "-"])
            continue

        def fmt(v):
            return f"{v:.4f}" if v is not None else "n/a"

        lines.append([name, fmt(rep.pearson_lf0), fmt(rep.pearson_energy),
                      fmt(rep.speaker_cosine), fmt(rep.speaker_probe_accuracy),
                      str(rep.n_utterances)])
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h)
              for i, h in enumerate(headers)]
    out = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for l in lines:
        out.append("  ".join(v.ljust(w) for v, w in zip(l, widths)))
    return "\n".join(out)


def run_ablation(checkpoints: dict, cache: FeatureCache, test_rows,
                 target_speaker, probe, mel_stats, params: FrameParams,
                 gl_iters: int = 32, out_json=None):
    """Evaluate every variant checkpoint; absent checkpoints are reported
    and skipped. Returns {variant: EvalReport | None}."""
    from .trainkit import load_checkpoint

    results = {}
    for variant in ABLATION_VARIANTS:
        path = checkpoints.get(variant)
        if path is None or not Path(path).exists():
            results[variant] = None
            continue
        model, _, _, _ = load_checkpoint(path)
        model.eval()
        results[variant] = evaluate_conversion(
            model, cache, test_rows, target_speaker, probe, mel_stats, params,
            gl_iters=gl_iters)
    if out_json:
        payload = {name: (rep.to_dict() if rep else None)
                   for name, rep in results.items()}
        Path(out_json).write_text(canonical_json(payload) + "\n",
                                  encoding="utf-8")
    return results
