"""Conversion module: conformer encoder, autoregressive mel decoder, convert().

The decoder emits one 80-dim mel frame per input frame (no learned
alignment, so output length always equals input length). Teacher forcing is
used when a reference mel is supplied; otherwise the decoder free-runs on
its own previous pre-postnet output.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .config import ConvnetConfig, RunConfig
from .errors import InvalidInputError, LengthMismatchError
from .signal import MelSpectrogram
from .stylenet import MultiScaleStyleEncoder, assemble_conditioning

N_MELS = 80


def sinusoidal_positions(T: int, dim: int, device=None, dtype=torch.float32):
    pos = torch.arange(T, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device),
                            idx / dim)
    pe = torch.zeros(T, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, :pe[:, 1::2].shape[1]])
    return pe


class _FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.silu(self.fc1(self.norm(x))))


class _ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2,
                                   groups=dim)
        self.bn = nn.BatchNorm1d(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        y = self.norm(x).transpose(1, 2)
        y = nn.functional.glu(self.pointwise_in(y), dim=1)
        y = torch.nn.functional.silu(self.bn(self.depthwise(y)))
        return self.pointwise_out(y).transpose(1, 2)


class ConformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, kernel: int, expansion: int):
        super().__init__()
        self.ff1 = _FeedForward(dim, expansion)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.conv = _ConvModule(dim, kernel)
        self.ff2 = _FeedForward(dim, expansion)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        a = self.attn_norm(x)
        x = x + self.attn(a, a, a, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


class ConformerEncoder(nn.Module):
    """Length-preserving contextual encoder over content + local style."""

    def __init__(self, in_dim: int, cfg: ConvnetConfig):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, cfg.d_enc)
        self.blocks = nn.ModuleList([
            ConformerBlock(cfg.d_enc, cfg.heads, cfg.conv_kernel,
                           cfg.ff_expansion) for _ in range(cfg.blocks)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.in_dim:
            raise InvalidInputError(
                f"encoder expects (B, T, {self.in_dim}), got {tuple(x.shape)}")
        h = self.proj(x)
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], device=h.device,
                                     dtype=h.dtype)
        for block in self.blocks:
            h = block(h)
        return h


class Prenet(nn.Module):
    def __init__(self, in_dim: int, dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)   # active in train mode only

    def forward(self, x):
        x = self.dropout(torch.relu(self.fc1(x)))
        return self.dropout(torch.relu(self.fc2(x)))


class Postnet(nn.Module):
    def __init__(self, channels: int, layers: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        convs = [nn.Conv1d(N_MELS, channels, kernel, padding=pad)]
        for _ in range(layers - 2):
            convs.append(nn.Conv1d(channels, channels, kernel, padding=pad))
        convs.append(nn.Conv1d(channels, N_MELS, kernel, padding=pad))
        self.convs = nn.ModuleList(convs)
        self.bns = nn.ModuleList([nn.BatchNorm1d(c.out_channels)
                                  for c in convs])

    def forward(self, mel):
        y = mel.transpose(1, 2)
        last = len(self.convs) - 1
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            y = bn(conv(y))
            if i != last:
                y = torch.tanh(y)
        return y.transpose(1, 2)


class Decoder(nn.Module):
    """Prenet + recurrent decoder + postnet, one frame per step."""

    def __init__(self, ctx_dim: int, cfg: ConvnetConfig):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.prenet = Prenet(N_MELS, cfg.prenet_dim, cfg.prenet_dropout)
        self.rnn = nn.LSTMCell(cfg.prenet_dim + ctx_dim, cfg.decoder_rnn_dim)
        self.proj = nn.Linear(cfg.decoder_rnn_dim, N_MELS)
        self.postnet = Postnet(cfg.postnet_channels, cfg.postnet_layers,
                               cfg.postnet_kernel)

    def forward(self, context: torch.Tensor, teacher: torch.Tensor = None):
        if context.dim() != 3 or context.shape[2] != self.ctx_dim:
            raise InvalidInputError(
                f"decoder expects context (B, T, {self.ctx_dim}), "
                f"got {tuple(context.shape)}")
        B, T, _ = context.shape
        if teacher is not None and teacher.shape[:2] != (B, T):
            raise LengthMismatchError(
                f"teacher mel is {tuple(teacher.shape[:2])}, context is {(B, T)}")
        h = context.new_zeros(B, self.rnn.hidden_size)
        c = context.new_zeros(B, self.rnn.hidden_size)
        prev = context.new_zeros(B, N_MELS)
        frames = []
        for t in range(T):
            x = torch.cat([self.prenet(prev), context[:, t]], dim=-1)
            h, c = self.rnn(x, (h, c))
            y = self.proj(h)
            frames.append(y)
            prev = teacher[:, t] if teacher is not None else y
        pre = torch.stack(frames, dim=1)
        post = pre + self.postnet(pre)
        return pre, post


class ConversionModel(nn.Module):
    """Style encoders + conformer + decoder + speaker embedding table."""

    def __init__(self, cfg: RunConfig, speaker_ids,
                 codebook_sizes=(64, 64)):
        super().__init__()
        self.cfg = cfg
        self.speaker_ids = list(speaker_ids)
        self._spk_index = {s: i for i, s in enumerate(self.speaker_ids)}
        self.style_encoder = MultiScaleStyleEncoder(cfg.stylenet, codebook_sizes)
        self.speaker_table = nn.Embedding(len(self.speaker_ids),
                                          cfg.stylenet.d_spk)
        enc_in = 256 + (cfg.stylenet.d_local if cfg.stylenet.enable_local else 0)
        self.encoder = ConformerEncoder(enc_in, cfg.convnet)
        ctx = cfg.convnet.d_enc + cfg.stylenet.d_spk
        if cfg.stylenet.enable_global:
            ctx += cfg.stylenet.d_global
        if cfg.stylenet.enable_frame:
            ctx += 3 * cfg.stylenet.d_e
        self.decoder = Decoder(ctx, cfg.convnet)

    def speaker_index(self, speaker_id: str) -> int:
        if speaker_id not in self._spk_index:
            raise InvalidInputError(
                f"unknown speaker {speaker_id!r}; known: {self.speaker_ids}")
        return self._spk_index[speaker_id]

    def forward(self, bn, ssl_idx, prosody, speaker_idx, teacher=None):
        styles = self.style_encoder(ssl_idx, bn, prosody)
        spk_emb = self.speaker_table(speaker_idx)
        enc_in, build_context = assemble_conditioning(bn, styles, spk_emb)
        enc_out = self.encoder(enc_in)
        context = build_context(enc_out)
        pre, post = self.decoder(context, teacher)
        return pre, post, styles

    def decoder_parameters(self):
        return self.decoder.parameters()

    def non_decoder_parameters(self):
        decoder_ids = {id(p) for p in self.decoder.parameters()}
        return [p for p in self.parameters() if id(p) not in decoder_ids]


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def bundle_to_tensors(bundle, dtype=torch.float32):
    """FeatureBundle -> batched (bn, ssl, prosody) tensors, B = 1."""
    bn = torch.from_numpy(np.ascontiguousarray(bundle.bn, dtype=np.float32))
    ssl = torch.from_numpy(np.ascontiguousarray(bundle.ssl, dtype=np.int64))
    prosody = torch.from_numpy(np.stack(
        [bundle.lf0_norm, bundle.vuv, bundle.energy_norm],
        axis=1).astype(np.float32))
    return (bn.unsqueeze(0).to(dtype), ssl.unsqueeze(0),
            prosody.unsqueeze(0).to(dtype))


def convert(model: ConversionModel, bundle, target_speaker: str,
            mel_stats) -> MelSpectrogram:
    """Run the trained model on source features, free-running decode.

    Output frame count equals the source frame count; values are returned in
    the raw log-mel domain (normalization undone via `mel_stats`).
    """
    mean, std = mel_stats
    bn, ssl, prosody = bundle_to_tensors(bundle)
    idx = torch.tensor([model.speaker_index(target_speaker)], dtype=torch.int64)
    model.eval()
    with torch.no_grad():
        _, post, _ = model(bn, ssl, prosody, idx, teacher=None)
    mel = post.squeeze(0).numpy().astype(np.float64) * std + mean
    return MelSpectrogram(values=mel)
