"""End-to-end stages behind the CLI: corpus, oracles, training, conversion.

A workspace directory holds everything a run produces:

    corpus/   WAVs + manifest + corpus_meta.json
    cache/    per-utterance feature archives + mel statistics
    oracles/  content extractor, SSL codebooks, style descriptor,
              speaker classifier, speaker probe
    models/   per-variant checkpoints + training logs
    reports/  evaluation output

Every artifact records the config hash, seed, and version string.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import container
from .config import RunConfig, VERSION, apply_variant, canonical_json
from .constraints import CrnnClassifier, load_classifier, save_classifier, \
    train_classifier
from .convnet import convert, parameter_count
from .errors import InvalidInputError, NotReadyError
from .extractors import ContentExtractor, ExternalFeatureSource, SSLQuantizer, \
    probe_richness
from .features import FeatureCache, features_from_waveform, resolve_cache_dir
from .signal import FrameParams, MelSpectrogram, Waveform, invert_mel, \
    load_wav, save_wav
from .synthcorpus import ContentScript, Manifest, STYLE_NAMES, build_corpus, \
    frame_unit_labels, read_manifest, utt_id, N_UNITS
from .trainkit import Oracles, TrainingData, finetune_alternating, \
    load_checkpoint, seed_everything, train_reconstruction

log = logging.getLogger("msmvc")


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def corpus_dir(self) -> Path:
        pointer = self.root / "corpus_location.json"
        if pointer.exists():
            return Path(json.loads(pointer.read_text())["corpus_dir"])
        return self.root / "corpus"

    def set_corpus_dir(self, path) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "corpus_location.json").write_text(
            json.dumps({"corpus_dir": str(path)}), encoding="utf-8")

    @property
    def cache_dir(self) -> Path:
        return resolve_cache_dir(self.root / "cache")

    @property
    def oracle_dir(self) -> Path:
        return self.root / "oracles"

    @property
    def model_dir(self) -> Path:
        return self.root / "models"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    def manifest(self) -> Manifest:
        return read_manifest(self.corpus_dir / "manifest.jsonl")

    def cache(self, cfg: RunConfig) -> FeatureCache:
        return FeatureCache(self.cache_dir, FrameParams.from_config(cfg.signal))


def gen_corpus(ws: Workspace, cfg: RunConfig, n_speakers: int,
               n_utts: int, seed: int, out_dir=None) -> Manifest:
    """Build the synthetic corpus and its signal-level feature cache."""
    params = FrameParams.from_config(cfg.signal)
    if out_dir is not None:
        ws.set_corpus_dir(out_dir)
    manifest = build_corpus(n_speakers, n_utts, ws.corpus_dir, seed, params)
    cache = ws.cache(cfg)
    cache.build_signal_features(manifest, seed, cfg.hash())
    cache.mel_stats(manifest)
    return manifest


def _styled_mels(cache: FeatureCache, rows, mel_stats):
    mean, std = mel_stats
    mels, styles, speakers = [], [], []
    for row in rows:
        mel = cache.load_signal(utt_id(row))[0]["mel"].astype(np.float64)
        mels.append((mel - mean) / std)
        styles.append(row["style"])
        speakers.append(row["speaker"])
    return mels, styles, speakers


def _content_provider(cfg: RunConfig, ws: Workspace):
    slot = cfg.extractor.content
    if slot.kind == "external":
        return ExternalFeatureSource(slot.external_dir, kind="bn")
    return ContentExtractor.load(ws.oracle_dir / "content.extractor",
                                 copy.deepcopy(cfg.extractor))


def _ssl_provider(cfg: RunConfig, ws: Workspace):
    slot = cfg.extractor.ssl
    if slot.kind == "external":
        return ExternalFeatureSource(slot.external_dir, kind="ssl")
    return SSLQuantizer.load(ws.oracle_dir / "ssl.extractor",
                             copy.deepcopy(cfg.extractor))


def pretrain_oracles(ws: Workspace, cfg: RunConfig) -> dict:
    """Fit feature providers and the frozen constraint/measurement models."""
    manifest = ws.manifest()
    cache = ws.cache(cfg)
    mel_stats = cache.mel_stats(manifest)
    ws.oracle_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    metrics = {}

    train_rows = manifest.split("train")
    test_rows = manifest.split("test")
    if not test_rows:
        raise InvalidInputError("manifest has no test split")

    # content extractor (BN): frame-labeled pseudo-phoneme classifier
    if cfg.extractor.content.kind == "toy_bn":
        def mel_and_labels(rows):
            mels, labels = [], []
            for row in rows:
                mel = cache.load_signal(utt_id(row))[0]["mel"].astype(np.float64)
                script = ContentScript.from_dict(row["script"])
                labels.append(frame_unit_labels(script, mel.shape[0],
                                                cache.params))
                mels.append(mel)
            return mels, labels

        tr_mels, tr_labels = mel_and_labels(train_rows)
        te_mels, te_labels = mel_and_labels(test_rows)
        content = ContentExtractor(copy.deepcopy(cfg.extractor))
        acc = content.fit(tr_mels, tr_labels, te_mels, te_labels, N_UNITS,
                          mel_stats, seed + 11)
        content.save(ws.oracle_dir / "content.extractor")
        metrics["content_frame_accuracy"] = acc
        log.info("content extractor frame accuracy: %.3f", acc)

    # SSL codebooks
    if cfg.extractor.ssl.kind == "toy_ssl":
        mels = [cache.load_signal(utt_id(r))[0]["mel"].astype(np.float64)
                for r in train_rows]
        ssl = SSLQuantizer(copy.deepcopy(cfg.extractor))
        ssl.fit(mels, mel_stats, seed + 17)
        ssl.save(ws.oracle_dir / "ssl.extractor")

    # constraint + measurement classifiers on normalized ground-truth mels
    tr_mels, tr_styles, tr_speakers = _styled_mels(cache, train_rows, mel_stats)
    te_mels, te_styles, te_speakers = _styled_mels(cache, test_rows, mel_stats)
    style_index = {name: i for i, name in enumerate(STYLE_NAMES)}
    speakers = manifest.speakers()
    spk_index = {s: i for i, s in enumerate(speakers)}

    def fit_crnn(labels_tr, labels_te, n_classes, fit_seed):
        model = CrnnClassifier(n_classes, copy.deepcopy(cfg.constraints))
        acc = train_classifier(model, tr_mels, labels_tr, te_mels, labels_te,
                               seed=fit_seed)
        return model, acc

    descriptor, acc = fit_crnn([style_index[s] for s in tr_styles],
                               [style_index[s] for s in te_styles],
                               len(STYLE_NAMES), seed + 23)
    save_classifier(ws.oracle_dir / "style_descriptor.ckpt", descriptor,
                    {"task": "style", "accuracy": acc,
                     "labels": list(STYLE_NAMES), "config_hash": cfg.hash(),
                     "seed": seed})
    metrics["style_descriptor_accuracy"] = acc
    log.info("style descriptor accuracy: %.3f", acc)

    classifier, acc = fit_crnn([spk_index[s] for s in tr_speakers],
                               [spk_index[s] for s in te_speakers],
                               len(speakers), seed + 29)
    save_classifier(ws.oracle_dir / "speaker_classifier.ckpt", classifier,
                    {"task": "speaker", "accuracy": acc, "labels": speakers,
                     "config_hash": cfg.hash(), "seed": seed})
    metrics["speaker_classifier_accuracy"] = acc

    probe, acc = fit_crnn([spk_index[s] for s in tr_speakers],
                          [spk_index[s] for s in te_speakers],
                          len(speakers), seed + 37)
    save_classifier(ws.oracle_dir / "speaker_probe.ckpt", probe,
                    {"task": "speaker_probe", "accuracy": acc,
                     "labels": speakers, "config_hash": cfg.hash(),
                     "seed": seed})
    metrics["speaker_probe_accuracy"] = acc
    log.info("speaker probe accuracy: %.3f", acc)

    # cache BN/SSL embeddings for training and probing
    cache.build_embeddings(manifest, _content_provider(cfg, ws),
                           _ssl_provider(cfg, ws), cfg.hash())

    floor = cfg.constraints.accuracy_floor
    for key, value in metrics.items():
        if value < floor and key != "speaker_probe_accuracy":
            log.warning("%s = %.3f below the %.2f floor", key, value, floor)
    if metrics.get("speaker_probe_accuracy", 1.0) < 0.9:
        log.warning("speaker probe accuracy below 0.9")

    (ws.oracle_dir / "metrics.json").write_text(
        canonical_json({"metrics": metrics, "config_hash": cfg.hash(),
                        "seed": seed, "version": VERSION}) + "\n",
        encoding="utf-8")
    return metrics


def load_oracles(ws: Workspace, cfg: RunConfig) -> dict:
    paths = {"descriptor": ws.oracle_dir / "style_descriptor.ckpt",
             "classifier": ws.oracle_dir / "speaker_classifier.ckpt",
             "probe": ws.oracle_dir / "speaker_probe.ckpt"}
    for name, path in paths.items():
        if not path.exists():
            raise NotReadyError(f"{name} checkpoint missing at {path}; "
                                "run pretrain-oracles first")
    return {
        "content": _content_provider(cfg, ws),
        "ssl": _ssl_provider(cfg, ws),
        "descriptor": load_classifier(paths["descriptor"]),
        "classifier": load_classifier(paths["classifier"]),
        "probe": load_classifier(paths["probe"]),
    }


def _training_oracles(cfg: RunConfig, loaded: dict) -> Oracles:
    return Oracles(
        descriptor=loaded["descriptor"] if cfg.constraints.use_style_descriptor
        else None,
        classifier=loaded["classifier"] if cfg.constraints.use_speaker_classifier
        else None)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    return apply_variant(copy.deepcopy(cfg), variant)


def train_variant(ws: Workspace, cfg: RunConfig, variant: str = "full",
                  stages=("reconstruction", "finetune")) -> dict:
    """Train one ablation variant under the shared seed and schedule."""
    vcfg = variant_config(cfg, variant)
    manifest = ws.manifest()
    cache = ws.cache(vcfg)
    loaded = load_oracles(ws, vcfg)
    oracles = _training_oracles(vcfg, loaded)
    data = TrainingData.from_cache(manifest, cache)
    codebooks = getattr(loaded["ssl"], "codebook_sizes", (64, 64))
    out = {}
    if "reconstruction" in stages:
        result = train_reconstruction(vcfg, data, oracles, ws.model_dir,
                                      codebook_sizes=codebooks, tag=variant)
        out["reconstruction"] = result
        log.info("variant %s reconstruction done: final loss %.4f", variant,
                 result.epoch_losses[-1])
    if "finetune" in stages:
        recon_ckpt = ws.model_dir / f"{variant}_recon.ckpt"
        if not recon_ckpt.exists():
            raise NotReadyError(f"no reconstruction checkpoint for {variant}")
        result = finetune_alternating(vcfg, data, oracles, recon_ckpt,
                                      ws.model_dir, tag=variant)
        out["finetune"] = result
        (ws.model_dir / f"{variant}_finetune_summary.json").write_text(
            canonical_json({"probe": result.probe, "config_hash": vcfg.hash(),
                            "seed": vcfg.seed, "version": VERSION}) + "\n",
            encoding="utf-8")
    return out


@dataclass
class ConversionSystem:
    """Everything needed to convert an arbitrary waveform."""
    model: object
    cfg: RunConfig
    mel_stats: tuple
    params: FrameParams
    content: object
    ssl: object

    @classmethod
    def load(cls, ws: Workspace, cfg: RunConfig, variant: str = "full",
             stage: str = "finetuned") -> "ConversionSystem":
        path = ws.model_dir / f"{variant}_{stage}.ckpt"
        if not path.exists():
            raise NotReadyError(f"no trained model at {path}")
        model, mcfg, meta, tensors = load_checkpoint(path)
        model.eval()
        return cls(model=model, cfg=mcfg,
                   mel_stats=(tensors["mel_mean"], tensors["mel_std"]),
                   params=FrameParams.from_config(mcfg.signal),
                   content=_content_provider(mcfg, ws),
                   ssl=_ssl_provider(mcfg, ws))

    def convert_waveform(self, w: Waveform, target_speaker: str,
                         uid: str = None) -> MelSpectrogram:
        bundle = features_from_waveform(w, self.params, self.content, self.ssl,
                                        uid=uid)
        return convert(self.model, bundle, target_speaker, self.mel_stats)


def convert_file(ws: Workspace, cfg: RunConfig, in_wav, target_speaker: str,
                 out_prefix, emit_audio: bool = False,
                 variant: str = "full", stage: str = "finetuned",
                 gl_iters: int = None) -> dict:
    system = ConversionSystem.load(ws, cfg, variant, stage)
    w = load_wav(in_wav)
    mel = system.convert_waveform(w, target_speaker, uid=Path(in_wav).stem)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    mel_path = out_prefix.with_suffix(".mel")
    container.save(mel_path, {"mel": mel.values.astype(np.float32)},
                   {"source": str(in_wav), "target_speaker": target_speaker,
                    "config_hash": cfg.hash(), "seed": cfg.seed,
                    "version": VERSION, "num_frames": mel.num_frames})
    result = {"mel": str(mel_path), "num_frames": mel.num_frames,
              "target_speaker": target_speaker,
              "model_parameters": parameter_count(system.model)}
    if emit_audio:
        wav_out = invert_mel(mel, gl_iters or cfg.signal.gl_iters,
                             system.params)
        wav_path = out_prefix.with_suffix(".wav")
        save_wav(wav_path, wav_out)
        result["wav"] = str(wav_path)
    return result


def richness_reports(ws: Workspace, cfg: RunConfig, kinds=("mel", "bn", "ssl"),
                     max_utts: int = None) -> dict:
    manifest = ws.manifest()
    cache = ws.cache(cfg)
    mel_stats = cache.mel_stats(manifest)
    train_rows = manifest.split("train")
    test_rows = manifest.split("test")
    if max_utts:
        train_rows = train_rows[:max_utts]
        test_rows = test_rows[:max(2, max_utts // 4)]
    bundles_tr = [cache.load_bundle(utt_id(r)) for r in train_rows]
    bundles_te = [cache.load_bundle(utt_id(r)) for r in test_rows]
    spk_tr = [r["speaker"] for r in train_rows]
    spk_te = [r["speaker"] for r in test_rows]
    out = {}
    for kind in kinds:
        out[kind] = probe_richness(kind, bundles_tr, bundles_te, spk_tr,
                                   spk_te, mel_stats, seed=cfg.seed)
    return out
