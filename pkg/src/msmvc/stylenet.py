"""Multi-scale style modeling: global, local, and frame-level encoders.

The global path embeds discrete SSL indices and squeezes an utterance into a
4-dim vector; the local path runs BN features through a stride-(1,2)
reference encoder and mean-pools GRU outputs over fixed gamma-frame
segments; the frame path embeds the normalized prosody trio per frame. The
tiny dimensionalities of the global/local outputs are the anti-leakage
bottleneck and are held at 4 unless a config explicitly overrides them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import StylenetConfig
from .errors import InvalidInputError, LengthMismatchError


@dataclass
class StyleSet:
    global_vec: torch.Tensor = None    # (B, 4)
    local_seq: torch.Tensor = None     # (B, ceil(T/gamma), 4)
    frame_seq: torch.Tensor = None     # (B, T, 3*d_e)
    gamma: int = 16


def segment_mean(x: torch.Tensor, gamma: int) -> torch.Tensor:
    """Mean over consecutive groups of `gamma` frames; (B, T, D) -> (B, S, D).

    A trailing partial segment is averaged over its actual length.
    """
    if gamma < 1:
        raise InvalidInputError("gamma must be >= 1")
    B, T, D = x.shape
    S = (T + gamma - 1) // gamma
    pad = S * gamma - T
    if pad:
        x = torch.cat([x, x.new_zeros(B, pad, D)], dim=1)
    sums = x.reshape(B, S, gamma, D).sum(dim=2)
    counts = torch.full((S,), float(gamma), dtype=x.dtype, device=x.device)
    if pad:
        counts[-1] = gamma - pad
    return sums / counts[None, :, None]


def upsample_repeat(local: torch.Tensor, gamma: int, T: int) -> torch.Tensor:
    """Nearest-neighbor upsampling of segment vectors back to frame rate."""
    out = torch.repeat_interleave(local, gamma, dim=1)
    if out.shape[1] < T:
        raise LengthMismatchError(
            f"local style covers {out.shape[1]} frames, need {T}")
    return out[:, :T]


class SslEmbedding(nn.Module):
    """Separate lookup table per SSL group, concatenated along features."""

    def __init__(self, codebook_sizes=(64, 64), embed_dim: int = 32):
        super().__init__()
        self.codebook_sizes = tuple(codebook_sizes)
        self.tables = nn.ModuleList(
            [nn.Embedding(size, embed_dim) for size in self.codebook_sizes])

    @property
    def out_dim(self) -> int:
        return len(self.tables) * self.tables[0].embedding_dim

    def forward(self, indices: torch.Tensor) -> torch.Tensor:
        if indices.dim() != 3 or indices.shape[2] != len(self.tables):
            raise InvalidInputError(
                f"SSL indices must be (B, T, {len(self.tables)})")
        outs = []
        for g, table in enumerate(self.tables):
            col = indices[..., g]
            if col.numel() and (col.min().item() < 0
                                or col.max().item() >= self.codebook_sizes[g]):
                raise InvalidInputError(
                    f"SSL index out of range for group {g} "
                    f"(codebook size {self.codebook_sizes[g]})")
            outs.append(table(col))
        return torch.cat(outs, dim=-1)


def _conv_stack(filters, strides):
    layers_conv, layers_bn = [], []
    chans = [1] + list(filters)
    for i in range(len(filters)):
        layers_conv.append(nn.Conv2d(chans[i], chans[i + 1], kernel_size=3,
                                     stride=strides, padding=1))
        layers_bn.append(nn.BatchNorm2d(chans[i + 1]))
    return nn.ModuleList(layers_conv), nn.ModuleList(layers_bn)


def _ceil_div_chain(n: int, stages: int) -> int:
    for _ in range(stages):
        n = (n + 1) // 2
    return n


class GlobalStyleEncoder(nn.Module):
    """Reference encoder over SSL embeddings -> one 4-dim vector per utterance."""

    def __init__(self, in_dim: int, filters=(32, 32, 64, 64, 128, 128),
                 out_dim: int = 4, post_tanh: bool = True,
                 min_frames: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.min_frames = min_frames
        self.post_tanh = post_tanh
        self.convs, self.bns = _conv_stack(filters, strides=(2, 2))
        gru_in = filters[-1] * _ceil_div_chain(in_dim, len(filters))
        self.gru = nn.GRU(gru_in, out_dim, batch_first=True)

    def forward(self, ssl_emb: torch.Tensor) -> torch.Tensor:
        B, T, D = ssl_emb.shape
        if D != self.in_dim:
            raise InvalidInputError(f"expected feature dim {self.in_dim}, got {D}")
        if T < self.min_frames:
            warnings.warn(
                f"global style input has {T} frames; zero-padding to "
                f"{self.min_frames}", stacklevel=2)
            ssl_emb = torch.cat(
                [ssl_emb, ssl_emb.new_zeros(B, self.min_frames - T, D)], dim=1)
        out = ssl_emb.unsqueeze(1)
        for conv, bn in zip(self.convs, self.bns):
            out = torch.relu(bn(conv(out)))
        out = out.transpose(1, 2).reshape(out.shape[0], out.shape[2], -1)
        _, state = self.gru(out)
        vec = state.squeeze(0)
        return torch.tanh(vec) if self.post_tanh else vec


class LocalStyleEncoder(nn.Module):
    """Reference encoder over BN features with time axis preserved.

    Convolutions stride only along the feature axis; the GRU output at every
    frame is then mean-pooled over consecutive gamma-frame segments.
    """

    def __init__(self, in_dim: int, filters=(32, 32, 64, 64, 128, 128),
                 out_dim: int = 4):
        super().__init__()
        self.in_dim = in_dim
        self.convs, self.bns = _conv_stack(filters, strides=(1, 2))
        gru_in = filters[-1] * _ceil_div_chain(in_dim, len(filters))
        self.gru = nn.GRU(gru_in, out_dim, batch_first=True)

    def frame_features(self, bn: torch.Tensor) -> torch.Tensor:
        if bn.shape[2] != self.in_dim:
            raise InvalidInputError(
                f"expected feature dim {self.in_dim}, got {bn.shape[2]}")
        out = bn.unsqueeze(1)
        for conv, bn_layer in zip(self.convs, self.bns):
            out = torch.relu(bn_layer(conv(out)))
        out = out.transpose(1, 2).reshape(out.shape[0], out.shape[2], -1)
        seq, _ = self.gru(out)
        return seq                         # (B, T, out_dim)

    def forward(self, bn: torch.Tensor, gamma: int) -> torch.Tensor:
        return segment_mean(self.frame_features(bn), gamma)


class FrameStyleEmbedder(nn.Module):
    """Independent affine map per prosody track, concatenated per frame."""

    TRACKS = ("lf0", "vuv", "energy")

    def __init__(self, d_e: int = 8):
        super().__init__()
        self.d_e = d_e
        self.maps = nn.ModuleList([nn.Linear(1, d_e) for _ in self.TRACKS])

    @property
    def out_dim(self) -> int:
        return len(self.maps) * self.d_e

    def forward(self, prosody: torch.Tensor) -> torch.Tensor:
        if prosody.dim() != 3 or prosody.shape[2] != len(self.maps):
            raise InvalidInputError("prosody tensor must be (B, T, 3)")
        return torch.cat([m(prosody[..., i:i + 1])
                          for i, m in enumerate(self.maps)], dim=-1)


def frame_encode(embedder: FrameStyleEmbedder, track) -> torch.Tensor:
    """Embed a ProsodyTrack; refuses unnormalized input."""
    if not getattr(track, "normalized", False):
        raise InvalidInputError("frame-level style requires normalized prosody")
    import numpy as np
    stacked = np.stack([track.lf0, track.vuv, track.energy], axis=1)
    tensor = torch.from_numpy(stacked.astype("float32")).unsqueeze(0)
    return embedder(tensor)


class MultiScaleStyleEncoder(nn.Module):
    """The three style levels behind per-level enable switches."""

    def __init__(self, cfg: StylenetConfig, codebook_sizes=(64, 64)):
        super().__init__()
        self.cfg = cfg
        self.ssl_embedding = SslEmbedding(codebook_sizes, cfg.ssl_embed_dim) \
            if cfg.enable_global else None
        self.global_encoder = GlobalStyleEncoder(
            in_dim=len(codebook_sizes) * cfg.ssl_embed_dim,
            filters=tuple(cfg.global_filters), out_dim=cfg.d_global,
            post_tanh=cfg.global_post_tanh,
            min_frames=cfg.min_global_frames) if cfg.enable_global else None
        self.local_encoder = LocalStyleEncoder(
            in_dim=256, filters=tuple(cfg.local_filters),
            out_dim=cfg.d_local) if cfg.enable_local else None
        self.frame_embedder = FrameStyleEmbedder(cfg.d_e) \
            if cfg.enable_frame else None

    def forward(self, ssl_idx, bn, prosody) -> StyleSet:
        styles = StyleSet(gamma=self.cfg.gamma)
        if self.global_encoder is not None:
            styles.global_vec = self.global_encoder(self.ssl_embedding(ssl_idx))
        if self.local_encoder is not None:
            styles.local_seq = self.local_encoder(bn, self.cfg.gamma)
        if self.frame_embedder is not None:
            styles.frame_seq = self.frame_embedder(prosody)
        return styles


def assemble_conditioning(bn: torch.Tensor, styles: StyleSet,
                          spk_emb: torch.Tensor):
    """Build the encoder input and a builder for the decoder context.

    The local sequence is upsampled by repetition and concatenated with BN
    before the encoder; global (repeated over time), frame-level style, and
    the speaker embedding (repeated over time) are concatenated with the
    encoder output afterwards.
    """
    B, T, _ = bn.shape
    if styles.frame_seq is not None and styles.frame_seq.shape[1] != T:
        raise LengthMismatchError(
            f"stream 'frame_style' has {styles.frame_seq.shape[1]} frames, "
            f"stream 'bn' has {T}")
    if spk_emb.dim() != 2 or spk_emb.shape[0] != B:
        raise LengthMismatchError("stream 'speaker' does not match batch size")

    if styles.local_seq is not None:
        expected = (T + styles.gamma - 1) // styles.gamma
        if styles.local_seq.shape[1] != expected:
            raise LengthMismatchError(
                f"stream 'local_style' has {styles.local_seq.shape[1]} segments, "
                f"expected {expected} for T={T}, gamma={styles.gamma}")
        local_up = upsample_repeat(styles.local_seq, styles.gamma, T)
        encoder_input = torch.cat([bn, local_up], dim=-1)
    else:
        encoder_input = bn

    def build_context(enc_out: torch.Tensor) -> torch.Tensor:
        if enc_out.shape[1] != T:
            raise LengthMismatchError(
                f"stream 'encoder_output' has {enc_out.shape[1]} frames, "
                f"stream 'bn' has {T}")
        parts = [enc_out]
        if styles.global_vec is not None:
            parts.append(styles.global_vec.unsqueeze(1).expand(-1, T, -1))
        if styles.frame_seq is not None:
            parts.append(styles.frame_seq)
        parts.append(spk_emb.unsqueeze(1).expand(-1, T, -1))
        return torch.cat(parts, dim=-1)

    return encoder_input, build_context
