"""Per-utterance feature cache shared by training, probing, and evaluation.

Two archives per utterance: <utt>.feat (mel + prosody, written right after
corpus generation) and <utt>.emb (BN + SSL, written once the providers are
fitted). Corpus-level mel statistics live in one archive beside them.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from . import container
from .config import VERSION
from .errors import NotReadyError
from .extractors import FeatureBundle
from .signal import (FrameParams, MelSpectrogram, Waveform, compute_mel,
                     extract_f0, load_wav, make_prosody, normalize_prosody)
from .synthcorpus import Manifest, utt_id

CACHE_ENV_VAR = "MSMVC_CACHE_DIR"


def resolve_cache_dir(default_dir) -> Path:
    override = os.environ.get(CACHE_ENV_VAR, "").strip()
    return Path(override) if override else Path(default_dir)


class FeatureCache:
    def __init__(self, cache_dir, params: FrameParams):
        self.dir = Path(cache_dir)
        self.params = params

    def signal_path(self, uid: str) -> Path:
        return self.dir / f"{uid}.feat"

    def emb_path(self, uid: str) -> Path:
        return self.dir / f"{uid}.emb"

    def stats_path(self) -> Path:
        return self.dir / "mel_stats.stats"

    def build_signal_features(self, manifest: Manifest, seed: int,
                              config_hash: str, progress=None) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for i, row in enumerate(manifest.rows):
            uid = utt_id(row)
            w = load_wav(manifest.wav_path(row))
            mel = compute_mel(w, self.params)
            f0, vuv = extract_f0(w, self.params)
            track = make_prosody(f0, vuv, w, self.params)
            norm = normalize_prosody(track)
            tensors = {
                "mel": mel.values.astype(np.float32),
                "lf0": track.lf0,
                "vuv": track.vuv,
                "energy": track.energy,
                "lf0_norm": norm.lf0,
                "energy_norm": norm.energy,
            }
            meta = {"utt_id": uid, "speaker": row["speaker"], "style": row["style"],
                    "num_frames": mel.num_frames, "config_hash": config_hash,
                    "seed": int(seed), "version": VERSION,
                    "lf0_fallback": bool(track.lf0_fallback)}
            container.save(self.signal_path(uid), tensors, meta, sidecar=False)
            if progress:
                progress(i + 1, len(manifest.rows))

    def load_signal(self, uid: str):
        path = self.signal_path(uid)
        if not path.exists():
            raise NotReadyError(f"no cached features for {uid}; run gen-corpus first")
        return container.load(path)

    def mel_stats(self, manifest: Manifest = None):
        """Per-bin mean/std over the train split; computed once then reused."""
        path = self.stats_path()
        if path.exists():
            tensors, _ = container.load(path)
            return tensors["mean"], tensors["std"]
        if manifest is None:
            raise NotReadyError("mel statistics not built yet")
        mels = [self.load_signal(utt_id(r))[0]["mel"].astype(np.float64)
                for r in manifest.split("train")]
        frames = np.concatenate(mels)
        mean = frames.mean(axis=0)
        std = np.maximum(frames.std(axis=0), 1e-3)
        container.save(path, {"mean": mean, "std": std},
                       {"version": VERSION, "n_frames": int(len(frames))},
                       sidecar=False)
        return mean, std

    def build_embeddings(self, manifest: Manifest, content_extractor,
                         ssl_extractor, config_hash: str) -> None:
        for row in manifest.rows:
            uid = utt_id(row)
            tensors, _ = self.load_signal(uid)
            mel = MelSpectrogram(values=tensors["mel"].astype(np.float64))
            bn = content_extractor.extract(mel, utt_id=uid)
            ssl = ssl_extractor.extract(mel, utt_id=uid)
            container.save(self.emb_path(uid),
                           {"bn": bn.values, "ssl": ssl.values},
                           {"utt_id": uid, "config_hash": config_hash,
                            "version": VERSION}, sidecar=False)

    def load_bundle(self, uid: str) -> FeatureBundle:
        sig_tensors, _ = self.load_signal(uid)
        emb_path = self.emb_path(uid)
        if not emb_path.exists():
            raise NotReadyError(
                f"no cached embeddings for {uid}; run pretrain-oracles first")
        emb_tensors, _ = container.load(emb_path)
        return FeatureBundle(
            bn=emb_tensors["bn"].astype(np.float32),
            ssl=emb_tensors["ssl"].astype(np.int64),
            lf0=sig_tensors["lf0"],
            vuv=sig_tensors["vuv"],
            energy=sig_tensors["energy"],
            lf0_norm=sig_tensors["lf0_norm"],
            energy_norm=sig_tensors["energy_norm"],
            mel=sig_tensors["mel"].astype(np.float64),
        )


def features_from_waveform(w: Waveform, params: FrameParams,
                           content_extractor, ssl_extractor,
                           uid: str = None) -> FeatureBundle:
    """One-off feature bundle for conversion of an arbitrary waveform."""
    mel = compute_mel(w, params)
    f0, vuv = extract_f0(w, params)
    track = make_prosody(f0, vuv, w, params)
    norm = normalize_prosody(track)
    bn = content_extractor.extract(mel, utt_id=uid)
    ssl = ssl_extractor.extract(mel, utt_id=uid)
    return FeatureBundle(bn=bn.values, ssl=ssl.values, lf0=track.lf0,
                         vuv=track.vuv, energy=track.energy, lf0_norm=norm.lf0,
                         energy_norm=norm.energy, mel=mel.values)
