"""Explicit constraint module: frozen descriptors and the training losses.

A small CRNN over mel spectrograms serves two roles with the same
architecture: pre-trained on style labels it becomes the style descriptor
whose tapped activations define the style matching loss; pre-trained on
speaker labels it becomes the speaker classifier. Both are frozen once
trained and act as measurement instruments for the conversion model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import container
from .config import ConstraintsConfig, VERSION
from .errors import (InvalidInputError, LengthMismatchError, NotReadyError,
                     NumericalError)

N_MELS = 80


@dataclass
class SERFeatures:
    """Activation taps at three abstraction levels plus the class logits."""
    low: torch.Tensor        # (B, T', C) variable length
    middle: torch.Tensor     # (B, gru_dim) fixed length
    high: torch.Tensor       # (B, fc_dim) fixed length
    logits: torch.Tensor     # (B, n_classes)


@dataclass
class ModeFlag:
    alpha: int               # 1 = reconstruction, 0 = simulation

    def __post_init__(self):
        if self.alpha not in (0, 1):
            raise InvalidInputError("alpha must be 0 (simulation) or 1 (reconstruction)")


RECONSTRUCTION = ModeFlag(alpha=1)
SIMULATION = ModeFlag(alpha=0)


class CrnnClassifier(nn.Module):
    """Conv2d stack -> GRU -> two FC layers -> class head, tapped at 3 depths."""

    def __init__(self, n_classes: int, cfg: ConstraintsConfig = None):
        super().__init__()
        cfg = cfg or ConstraintsConfig()
        self.cfg = cfg
        chans = [1] + list(cfg.conv_channels)
        self.convs = nn.ModuleList([
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(len(cfg.conv_channels))])
        self.bns = nn.ModuleList([nn.BatchNorm2d(c) for c in cfg.conv_channels])
        freq = N_MELS
        for _ in cfg.conv_channels:
            freq = (freq + 1) // 2
        self.gru = nn.GRU(cfg.conv_channels[-1] * freq, cfg.gru_dim,
                          batch_first=True)
        self.fc1 = nn.Linear(cfg.gru_dim, cfg.fc_dims[0])
        self.fc2 = nn.Linear(cfg.fc_dims[0], cfg.fc_dims[1])
        self.head = nn.Linear(cfg.fc_dims[1], n_classes)
        self.trained = False

    def forward(self, mel: torch.Tensor) -> SERFeatures:
        if mel.dim() != 3 or mel.shape[2] != N_MELS:
            raise InvalidInputError(
                f"classifier expects (B, T, {N_MELS}), got {tuple(mel.shape)}")
        out = mel.unsqueeze(1)
        for conv, bn in zip(self.convs, self.bns):
            out = torch.relu(bn(conv(out)))
        low = out.transpose(1, 2).reshape(out.shape[0], out.shape[2], -1)
        _, state = self.gru(low)
        middle = state.squeeze(0)
        high = self.fc2(torch.relu(self.fc1(middle)))
        logits = self.head(torch.relu(high))
        return SERFeatures(low=low, middle=middle, high=high, logits=logits)

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        """Penultimate-layer embedding used for similarity measurements."""
        return self.forward(mel).high

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


def train_classifier(model: CrnnClassifier, mels_train, labels_train,
                     mels_val, labels_val, seed: int,
                     epochs: int = None, lr: float = None,
                     batch_size: int = None) -> float:
    """Supervised pre-training on whole utterances; returns held-out accuracy.

    Utterances keep their native lengths; batches group equal-length crops by
    trimming each batch to its shortest member.
    """
    cfg = model.cfg
    epochs = epochs or cfg.descriptor_epochs
    lr = lr or cfg.descriptor_lr
    batch_size = batch_size or cfg.descriptor_batch
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    tensors = [torch.from_numpy(m.astype(np.float32)) for m in mels_train]
    labels = torch.tensor(labels_train, dtype=torch.int64)
    model.train()
    for epoch in range(epochs):
        if epoch == (2 * epochs) // 3:
            for group in opt.param_groups:
                group["lr"] = lr * 0.5
        order = rng.permutation(len(tensors))
        for start in range(0, len(tensors), batch_size):
            idx = order[start:start + batch_size]
            T = min(tensors[i].shape[0] for i in idx)
            crops = []
            for i in idx:
                off = int(rng.integers(0, tensors[i].shape[0] - T + 1))
                crops.append(tensors[i][off:off + T])
            batch = torch.stack(crops)
            opt.zero_grad()
            loss = loss_fn(model(batch).logits, labels[idx])
            if not torch.isfinite(loss):
                raise NumericalError("classifier pre-training diverged")
            loss.backward()
            opt.step()
    model.eval()
    correct = 0
    with torch.no_grad():
        for m, y in zip(mels_val, labels_val):
            batch = torch.from_numpy(m.astype(np.float32)).unsqueeze(0)
            correct += int(model(batch).logits.argmax(dim=1).item() == y)
    model.trained = True
    model.freeze()
    return correct / max(len(mels_val), 1)


def ser_forward(model: CrnnClassifier, mel: torch.Tensor) -> SERFeatures:
    """Descriptor taps for loss computation; requires a pre-trained model."""
    if not model.trained:
        raise NotReadyError("style descriptor has not been pre-trained")
    return model(mel)


def style_matching_loss(descriptor: CrnnClassifier, mel_ref: torch.Tensor,
                        mel_pred: torch.Tensor, include_low: bool):
    """Squared-distance match of descriptor taps between reference and
    prediction; the low (frame-resolution) tap participates only in
    reconstruction mode. Returns (low, middle, high) scalar terms."""
    if include_low and mel_ref.shape[1] != mel_pred.shape[1]:
        raise LengthMismatchError(
            f"low-tap style loss needs equal frame counts, got "
            f"{mel_ref.shape[1]} vs {mel_pred.shape[1]}")
    with torch.no_grad():
        ref = ser_forward(descriptor, mel_ref)
    pred = ser_forward(descriptor, mel_pred)
    middle = torch.sum((ref.middle - pred.middle) ** 2)
    high = torch.sum((ref.high - pred.high) ** 2)
    low = None
    if include_low:
        low = torch.sum((ref.low - pred.low) ** 2)
    return low, middle, high


def speaker_classification_loss(classifier: CrnnClassifier,
                                mel_pred: torch.Tensor,
                                speaker_idx: torch.Tensor):
    """Negative log-probability of the target speaker given the prediction."""
    if not classifier.trained:
        raise NotReadyError("speaker classifier has not been pre-trained")
    n = classifier.head.out_features
    if speaker_idx.min().item() < 0 or speaker_idx.max().item() >= n:
        raise InvalidInputError(
            f"speaker index outside the classifier's {n} training speakers")
    logits = classifier(mel_pred).logits
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(1, speaker_idx.unsqueeze(1)).sum()


def mel_reconstruction_loss(target: torch.Tensor, pred_pre: torch.Tensor,
                            pred_post: torch.Tensor):
    """Squared L2 distance, applied to both decoder outputs and summed."""
    if target.shape != pred_pre.shape or target.shape != pred_post.shape:
        raise LengthMismatchError(
            f"reconstruction loss shapes differ: target {tuple(target.shape)}, "
            f"pre {tuple(pred_pre.shape)}, post {tuple(pred_post.shape)}")
    return torch.sum((target - pred_pre) ** 2) + torch.sum((target - pred_post) ** 2)


@dataclass
class LossParts:
    recons: torch.Tensor = None
    speaker: torch.Tensor = None
    style_low: torch.Tensor = None
    style_middle: torch.Tensor = None
    style_high: torch.Tensor = None


def total_loss(parts: LossParts, mode: ModeFlag):
    """Mode-weighted sum: reconstruction uses all five terms, simulation only
    the speaker and middle/high style terms."""
    if mode.alpha == 0:
        if parts.recons is not None:
            raise InvalidInputError(
                "simulation mode has no ground truth; reconstruction term is invalid")
        if parts.style_low is not None:
            raise InvalidInputError(
                "low-level style term is excluded from simulation mode")
        terms = [parts.speaker, parts.style_middle, parts.style_high]
    else:
        if parts.recons is None:
            raise InvalidInputError("reconstruction mode requires the recons term")
        terms = [parts.recons, parts.speaker, parts.style_low,
                 parts.style_middle, parts.style_high]
    total = None
    for term in terms:
        if term is None:
            continue
        total = term if total is None else total + term
    if total is None:
        raise InvalidInputError("no loss terms supplied")
    return total


def save_classifier(path, model: CrnnClassifier, meta: dict = None) -> None:
    if not model.trained:
        raise NotReadyError("refusing to save an untrained classifier")
    tensors = {k: v.detach().numpy() for k, v in model.state_dict().items()}
    info = {"version": VERSION, "n_classes": model.head.out_features,
            "conv_channels": list(model.cfg.conv_channels),
            "gru_dim": model.cfg.gru_dim, "fc_dims": list(model.cfg.fc_dims)}
    info.update(meta or {})
    container.save(path, tensors, info)


def load_classifier(path, cfg: ConstraintsConfig = None) -> CrnnClassifier:
    tensors, meta = container.load(path)
    cfg = cfg or ConstraintsConfig()
    cfg.conv_channels = tuple(meta["conv_channels"])
    cfg.gru_dim = int(meta["gru_dim"])
    cfg.fc_dims = tuple(meta["fc_dims"])
    model = CrnnClassifier(int(meta["n_classes"]), cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.trained = True
    model.freeze()
    return model
