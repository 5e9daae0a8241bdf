"""Two-stage training: reconstruction, then alternating finetune.

Stage 1 optimizes everything with teacher forcing; stage 2 alternates one
reconstruction batch with one simulation batch (free-running decode toward a
randomly reassigned speaker) and updates only the decoder. Batches are
equal-length random crops so every component runs fully vectorized without
padding or masks. All randomness is derived from (seed, epoch) so a resumed
run is bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .config import RunConfig, StageConfig, VERSION, load_config
from .constraints import (LossParts, RECONSTRUCTION, SIMULATION,
                          mel_reconstruction_loss, speaker_classification_loss,
                          style_matching_loss, total_loss)
from .convnet import ConversionModel
from .errors import InvalidInputError, NotReadyError, NumericalError
from .features import FeatureCache
from .synthcorpus import Manifest, utt_id


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)   # keeps runs bit-reproducible on one machine


@dataclass
class TrainingExample:
    content_utt: str
    style_utt: str
    speaker: str
    alpha: int

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise InvalidInputError("alpha must be 0 or 1")
        if self.content_utt != self.style_utt:
            raise InvalidInputError(
                "content and style always come from the same utterance")


@dataclass
class UtteranceRecord:
    uid: str
    speaker: str
    bn: torch.Tensor         # (T, 256) float32
    ssl: torch.Tensor        # (T, 2) int64
    prosody: torch.Tensor    # (T, 3) float32
    mel_norm: torch.Tensor   # (T, 80) float32, z-scored

    @property
    def num_frames(self) -> int:
        return self.mel_norm.shape[0]


@dataclass
class TrainingData:
    records: list
    speakers: list
    mel_mean: np.ndarray
    mel_std: np.ndarray

    def speaker_index(self, speaker: str) -> int:
        return self.speakers.index(speaker)

    @classmethod
    def from_cache(cls, manifest: Manifest, cache: FeatureCache,
                   split: str = "train", speakers: list = None) -> "TrainingData":
        mean, std = cache.mel_stats(manifest)
        records = []
        for row in manifest.split(split):
            uid = utt_id(row)
            b = cache.load_bundle(uid)
            mel_norm = ((b.mel - mean) / std).astype(np.float32)
            prosody = np.stack([b.lf0_norm, b.vuv, b.energy_norm],
                               axis=1).astype(np.float32)
            records.append(UtteranceRecord(
                uid=uid, speaker=row["speaker"],
                bn=torch.from_numpy(b.bn),
                ssl=torch.from_numpy(b.ssl),
                prosody=torch.from_numpy(prosody),
                mel_norm=torch.from_numpy(mel_norm)))
        speakers = speakers or sorted({r.speaker for r in records})
        return cls(records=records, speakers=speakers,
                   mel_mean=mean, mel_std=std)


def sample_simulation_batch(records, rng: np.random.Generator,
                            batch_size: int, speakers=None,
                            exclude_source: bool = True):
    """Simulation-mode examples: style/content from one utterance, speaker
    drawn uniformly from the other training speakers.

    Returns (examples, record_indices) so a trainer can rebuild tensors.
    """
    speakers = speakers or sorted({r.speaker for r in records})
    if len(speakers) < 2:
        raise InvalidInputError("simulation sampling needs at least 2 speakers")
    picks = rng.integers(0, len(records), size=batch_size)
    examples = []
    for i in picks:
        rec = records[int(i)]
        if exclude_source:
            pool = [s for s in speakers if s != rec.speaker]
        else:
            pool = speakers
        target = pool[int(rng.integers(0, len(pool)))]
        examples.append(TrainingExample(content_utt=rec.uid, style_utt=rec.uid,
                                        speaker=target, alpha=0))
    return examples, [int(i) for i in picks]


def _crop_batch(records, indices, crop_frames: int, rng: np.random.Generator):
    """Equal-length random crops; length is the batch minimum, capped."""
    recs = [records[int(i)] for i in indices]
    L = min(min(r.num_frames for r in recs), crop_frames)
    bn, ssl, prosody, mel = [], [], [], []
    for r in recs:
        off = int(rng.integers(0, r.num_frames - L + 1))
        bn.append(r.bn[off:off + L])
        ssl.append(r.ssl[off:off + L])
        prosody.append(r.prosody[off:off + L])
        mel.append(r.mel_norm[off:off + L])
    return (torch.stack(bn), torch.stack(ssl), torch.stack(prosody),
            torch.stack(mel), recs)


@dataclass
class Oracles:
    descriptor: object = None     # style descriptor (frozen) or None
    classifier: object = None     # speaker classifier (frozen) or None


@dataclass
class StepLosses:
    recons: float = 0.0
    style_low: float = 0.0
    style_mid: float = 0.0
    style_high: float = 0.0
    speaker: float = 0.0
    total: float = 0.0


def _loss_terms(model, oracles: Oracles, batch, spk_idx, mode, source_mel=None):
    bn, ssl, prosody, mel = batch
    parts = LossParts()
    if mode.alpha == 1:
        pre, post, _ = model(bn, ssl, prosody, spk_idx, teacher=mel)
        parts.recons = mel_reconstruction_loss(mel, pre, post)
        ref = mel
    else:
        pre, post, _ = model(bn, ssl, prosody, spk_idx, teacher=None)
        ref = source_mel
    if oracles.descriptor is not None:
        low, mid, high = style_matching_loss(oracles.descriptor, ref, post,
                                             include_low=(mode.alpha == 1))
        parts.style_low, parts.style_middle, parts.style_high = low, mid, high
    if oracles.classifier is not None:
        parts.speaker = speaker_classification_loss(oracles.classifier, post,
                                                    spk_idx)
    loss = total_loss(parts, mode)
    B = bn.shape[0]

    def val(x):
        return float(x.detach()) / B if x is not None else 0.0

    return loss, StepLosses(recons=val(parts.recons), style_low=val(parts.style_low),
                            style_mid=val(parts.style_middle),
                            style_high=val(parts.style_high),
                            speaker=val(parts.speaker), total=float(loss.detach()) / B)


def _check_finite(loss, workdir, epoch, step, uids, losses: StepLosses):
    if torch.isfinite(loss):
        return
    dump = {"epoch": epoch, "step": step, "utterances": uids,
            "losses": losses.__dict__}
    path = Path(workdir) / "diagnostic_dump.json"
    path.write_text(json.dumps(dump, indent=2), encoding="utf-8")
    raise NumericalError(f"non-finite loss at epoch {epoch} step {step}; "
                         f"diagnostics in {path}")


def parameter_fingerprints(model: torch.nn.Module) -> dict:
    out = {}
    for name, p in model.named_parameters():
        out[name] = hashlib.sha256(
            p.detach().numpy().astype("<f4").tobytes()).hexdigest()
    return out


class EpochLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.rows = []

    def log(self, **row):
        self.rows.append(row)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    epoch_losses: list
    probe: dict = field(default_factory=dict)


def save_checkpoint(path, model: ConversionModel, optimizer, epoch: int,
                    stage: str, cfg: RunConfig, data: TrainingData,
                    codebook_sizes) -> None:
    tensors = {f"model.{k}": v.detach().numpy()
               for k, v in model.state_dict().items()}
    if optimizer is not None:
        opt_state = optimizer.state_dict()["state"]
        for pid, state in opt_state.items():
            for key, value in state.items():
                arr = value.detach().numpy() if torch.is_tensor(value) \
                    else np.asarray(value)
                tensors[f"opt.{pid}.{key}"] = arr
    tensors["torch_rng"] = torch.get_rng_state().numpy()
    tensors["mel_mean"] = data.mel_mean
    tensors["mel_std"] = data.mel_std
    meta = {"version": VERSION, "epoch": epoch, "stage": stage,
            "config": cfg.to_dict(), "config_hash": cfg.hash(),
            "seed": cfg.seed, "speakers": data.speakers,
            "codebook_sizes": list(codebook_sizes)}
    container.save(path, tensors, meta)


def load_checkpoint(path):
    """Rebuild (model, meta, tensors); optimizer/rng restore is the trainer's job."""
    tensors, meta = container.load(path)
    cfg = load_config(overrides=meta["config"])
    model = ConversionModel(cfg, meta["speakers"],
                            codebook_sizes=tuple(meta["codebook_sizes"]))
    state = {k[len("model."):]: torch.from_numpy(v)
             for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, cfg, meta, tensors


def _restore_optimizer(optimizer, tensors) -> None:
    groups = optimizer.state_dict()
    state = {}
    for key, arr in tensors.items():
        if not key.startswith("opt."):
            continue
        _, pid, name = key.split(".", 2)
        entry = state.setdefault(int(pid), {})
        entry[name] = torch.from_numpy(arr.copy()) if arr.ndim else \
            torch.from_numpy(arr.copy()).reshape(())
    groups["state"] = state
    optimizer.load_state_dict(groups)


def _mel_stats_pair(data: TrainingData):
    return data.mel_mean, data.mel_std


def train_reconstruction(cfg: RunConfig, data: TrainingData, oracles: Oracles,
                         workdir, codebook_sizes=(64, 64), tag: str = "model",
                         resume_from=None,
                         stop_on_convergence: bool = True) -> TrainResult:
    """Stage 1: teacher-forced training of all parameters."""
    stage = cfg.trainkit.recon
    stage.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log = EpochLogger(workdir / f"{tag}_recon_log.jsonl")

    if resume_from is not None:
        model, _, meta, tensors = load_checkpoint(resume_from)
        start_epoch = int(meta["epoch"])
        optimizer = torch.optim.Adam(model.parameters(), lr=stage.lr0)
        _restore_optimizer(optimizer, tensors)
        torch.set_rng_state(torch.from_numpy(tensors["torch_rng"]))
        torch.set_num_threads(1)
    else:
        seed_everything(cfg.seed)
        model = ConversionModel(cfg, data.speakers, codebook_sizes=codebook_sizes)
        optimizer = torch.optim.Adam(model.parameters(), lr=stage.lr0)
        start_epoch = 0

    ckpt = workdir / f"{tag}_recon.ckpt"
    epoch_losses = []
    model.train()
    for epoch in range(start_epoch, stage.epochs):
        lr = stage.lr0 * stage.decay_rate ** (epoch // stage.decay_every)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng((cfg.seed, 101, epoch))
        order = rng.permutation(len(data.records))
        sums = StepLosses()
        steps = 0
        for start in range(0, len(order), stage.batch_size):
            idx = order[start:start + stage.batch_size]
            bn, ssl, prosody, mel, recs = _crop_batch(
                data.records, idx, cfg.trainkit.crop_frames, rng)
            spk_idx = torch.tensor([data.speaker_index(r.speaker) for r in recs],
                                   dtype=torch.int64)
            optimizer.zero_grad()
            loss, losses = _loss_terms(model, oracles, (bn, ssl, prosody, mel),
                                       spk_idx, RECONSTRUCTION)
            _check_finite(loss, workdir, epoch, steps,
                          [r.uid for r in recs], losses)
            loss.backward()
            optimizer.step()
            for name in vars(sums):
                setattr(sums, name, getattr(sums, name) + getattr(losses, name))
            steps += 1
        mean = {k: v / steps for k, v in vars(sums).items()}
        epoch_losses.append(mean["total"])
        log.log(epoch=epoch, mode_mix="reconstruction", L_recons=mean["recons"],
                L_style_low=mean["style_low"], L_style_mid=mean["style_mid"],
                L_style_high=mean["style_high"], L_speaker=mean["speaker"],
                lr=lr)
        if (epoch + 1) % cfg.trainkit.checkpoint_every == 0:
            save_checkpoint(ckpt, model, optimizer, epoch + 1, "reconstruction",
                            cfg, data, codebook_sizes)
        window = cfg.trainkit.convergence_window
        if stop_on_convergence and len(epoch_losses) > window:
            prev = epoch_losses[-window - 1]
            if prev > 0 and (prev - epoch_losses[-1]) / prev < \
                    cfg.trainkit.convergence_rel_tol:
                break

    save_checkpoint(ckpt, model, optimizer, len(epoch_losses) + start_epoch,
                    "reconstruction", cfg, data, codebook_sizes)
    return TrainResult(checkpoint=ckpt, log=log.path, epoch_losses=epoch_losses)


def _probe_metrics(model, oracles: Oracles, data: TrainingData, cfg: RunConfig):
    """Fixed-batch losses used to track the finetune stage's effect."""
    rng = np.random.default_rng((cfg.seed, 313))
    batch_size = min(cfg.trainkit.finetune.batch_size, len(data.records))
    idx = rng.permutation(len(data.records))[:batch_size]
    bn, ssl, prosody, mel, recs = _crop_batch(data.records, idx,
                                              cfg.trainkit.crop_frames, rng)
    own_idx = torch.tensor([data.speaker_index(r.speaker) for r in recs],
                           dtype=torch.int64)
    examples, _ = sample_simulation_batch(
        recs, rng, batch_size, speakers=data.speakers,
        exclude_source=cfg.trainkit.exclude_source_speaker)
    sim_idx = torch.tensor([data.speaker_index(e.speaker) for e in examples],
                           dtype=torch.int64)
    modes = {name: m.training for name, m in model.named_modules()}
    model.eval()
    metrics = {}
    with torch.no_grad():
        pre, post, _ = model(bn, ssl, prosody, own_idx, teacher=mel)
        metrics["recon_loss"] = float(
            mel_reconstruction_loss(mel, pre, post)) / batch_size
        if oracles.classifier is not None:
            _, sim_post, _ = model(bn, ssl, prosody, sim_idx, teacher=None)
            metrics["sim_speaker_loss"] = float(speaker_classification_loss(
                oracles.classifier, sim_post, sim_idx)) / batch_size
    for name, module in model.named_modules():
        module.training = modes[name]
    return metrics


def finetune_alternating(cfg: RunConfig, data: TrainingData, oracles: Oracles,
                         checkpoint, workdir, tag: str = "model") -> TrainResult:
    """Stage 2: decoder-only updates, alternating reconstruction/simulation."""
    stage = cfg.trainkit.finetune
    stage.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    log = EpochLogger(workdir / f"{tag}_finetune_log.jsonl")

    model, _, meta, tensors = load_checkpoint(checkpoint)
    if meta["stage"] != "reconstruction":
        raise NotReadyError("finetune expects a reconstruction-stage checkpoint")
    torch.set_rng_state(torch.from_numpy(tensors["torch_rng"]))
    torch.set_num_threads(1)

    # freeze everything but the decoder; frozen modules also stop updating
    # their batch-norm statistics
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.decoder.parameters():
        p.requires_grad_(True)
    model.eval()
    model.decoder.train()

    optimizer = torch.optim.Adam(model.decoder.parameters(), lr=stage.lr0)
    probe_start = _probe_metrics(model, oracles, data, cfg)
    simulate = stage.mode_schedule == "alternating"

    ckpt = workdir / f"{tag}_finetuned.ckpt"
    epoch_losses = []
    for epoch in range(stage.epochs):
        lr = stage.lr0 * stage.decay_rate ** (epoch // stage.decay_every)
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng((cfg.seed, 211, epoch))
        order = rng.permutation(len(data.records))
        sums = StepLosses()
        steps = 0
        for start in range(0, len(order), stage.batch_size):
            idx = order[start:start + stage.batch_size]
            batch = _crop_batch(data.records, idx, cfg.trainkit.crop_frames, rng)
            bn, ssl, prosody, mel, recs = batch
            own_idx = torch.tensor([data.speaker_index(r.speaker) for r in recs],
                                   dtype=torch.int64)
            optimizer.zero_grad()
            loss, losses = _loss_terms(model, oracles, (bn, ssl, prosody, mel),
                                       own_idx, RECONSTRUCTION)
            _check_finite(loss, workdir, epoch, steps, [r.uid for r in recs], losses)
            loss.backward()
            optimizer.step()
            for name in vars(sums):
                setattr(sums, name, getattr(sums, name) + getattr(losses, name))
            steps += 1

            # paired second step: simulation mode, or reconstruction again
            # when the simulation stage is ablated (identical step counts)
            optimizer.zero_grad()
            if simulate:
                examples, picks = sample_simulation_batch(
                    data.records, rng, len(recs), speakers=data.speakers,
                    exclude_source=cfg.trainkit.exclude_source_speaker)
                sim_batch = _crop_batch(data.records, picks,
                                        cfg.trainkit.crop_frames, rng)
                s_bn, s_ssl, s_prosody, s_mel, s_recs = sim_batch
                sim_idx = torch.tensor(
                    [data.speaker_index(e.speaker) for e in examples],
                    dtype=torch.int64)
                loss, losses = _loss_terms(model, oracles,
                                           (s_bn, s_ssl, s_prosody, s_mel),
                                           sim_idx, SIMULATION, source_mel=s_mel)
                step_uids = [r.uid for r in s_recs]
            else:
                loss, losses = _loss_terms(model, oracles,
                                           (bn, ssl, prosody, mel), own_idx,
                                           RECONSTRUCTION)
                step_uids = [r.uid for r in recs]
            _check_finite(loss, workdir, epoch, steps, step_uids, losses)
            loss.backward()
            optimizer.step()
            for name in vars(sums):
                setattr(sums, name, getattr(sums, name) + getattr(losses, name))
            steps += 1
        mean = {k: v / steps for k, v in vars(sums).items()}
        epoch_losses.append(mean["total"])
        log.log(epoch=epoch,
                mode_mix="1:1" if simulate else "reconstruction",
                L_recons=mean["recons"], L_style_low=mean["style_low"],
                L_style_mid=mean["style_mid"], L_style_high=mean["style_high"],
                L_speaker=mean["speaker"], lr=lr)

    probe_end = _probe_metrics(model, oracles, data, cfg)
    save_checkpoint(ckpt, model, optimizer, stage.epochs, "finetune", cfg,
                    data, tuple(meta["codebook_sizes"]))
    return TrainResult(checkpoint=ckpt, log=log.path, epoch_losses=epoch_losses,
                       probe={"start": probe_start, "end": probe_end})
