"""Stand-in feature providers behind swappable interfaces.

The content provider is a small per-frame pseudo-phoneme classifier whose
penultimate activations play the role of ASR bottleneck (BN) features; the
discrete provider is a pair of k-means codebooks over split mel bands. Both
expose `extract(mel, utt_id=None)` so a provider backed by precomputed
files can be substituted via config with no other code change.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression, Ridge

from . import container
from .config import VERSION, ExtractorConfig
from .errors import InvalidInputError, LengthMismatchError, NotReadyError
from .signal import MelSpectrogram

BN_DIM = 256
SSL_GROUPS = 2


@dataclass
class BNFeature:
    values: np.ndarray            # (T, 256) float32

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != BN_DIM:
            raise InvalidInputError(
                f"BN features must be (T, {BN_DIM}), got {self.values.shape}")


@dataclass
class SSLIndices:
    values: np.ndarray            # (T, 2) int64
    codebook_sizes: tuple = (64, 64)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != SSL_GROUPS:
            raise InvalidInputError(
                f"SSL indices must be (T, {SSL_GROUPS}), got {self.values.shape}")
        for g, size in enumerate(self.codebook_sizes):
            col = self.values[:, g]
            if col.size and (col.min() < 0 or col.max() >= size):
                raise InvalidInputError(
                    f"SSL group {g} index outside [0, {size})")


@dataclass
class FeatureBundle:
    """Per-utterance frame-aligned features."""
    bn: np.ndarray                # (T, 256)
    ssl: np.ndarray               # (T, 2) int64
    lf0: np.ndarray               # (T,) raw log-Hz
    vuv: np.ndarray               # (T,)
    energy: np.ndarray            # (T,) raw
    lf0_norm: np.ndarray          # (T,) in [0, 1]
    energy_norm: np.ndarray       # (T,) in [0, 1]
    mel: np.ndarray               # (T, 80) raw log-mel

    def __post_init__(self):
        T = self.mel.shape[0]
        for name in ("bn", "ssl", "lf0", "vuv", "energy", "lf0_norm", "energy_norm"):
            if getattr(self, name).shape[0] != T:
                raise LengthMismatchError(
                    f"feature stream {name!r} has {getattr(self, name).shape[0]} "
                    f"frames, mel has {T}")

    @property
    def num_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class RichnessReport:
    feature_kind: str             # mel | bn | ssl
    mse_lf0: float
    mse_energy: float
    speaker_accuracy: float


def _mel_values(m) -> np.ndarray:
    return m.values if isinstance(m, MelSpectrogram) else np.asarray(m)


class _FrameClassifier(nn.Module):
    """Per-frame pseudo-phoneme recognizer; the wide layer before the
    softmax head doubles as the BN feature.

    A narrow pinch layer sits in front of it so the classifier cannot relay
    the full input spectrum: the published bottleneck features are
    content-rich but prosody/speaker-poor, and without the pinch a shallow
    recognizer keeps everything.
    """

    def __init__(self, in_dim: int, hidden: int, n_classes: int,
                 pinch: int = 24, dropout: float = 0.3):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.drop = nn.Dropout(dropout)
        self.pinch = nn.Linear(hidden, pinch)
        self.fc2 = nn.Linear(pinch, hidden)
        self.head = nn.Linear(hidden, n_classes)

    def forward(self, x, return_hidden=False):
        h = self.drop(torch.relu(self.fc1(x)))
        h = torch.relu(self.pinch(h))
        h = torch.relu(self.fc2(h))
        logits = self.head(h)
        if return_hidden:
            return logits, h
        return logits


def _stack_context(mel: np.ndarray, context: int) -> np.ndarray:
    padded = np.pad(mel, ((context, context), (0, 0)), mode="edge")
    cols = [padded[i:i + mel.shape[0]] for i in range(2 * context + 1)]
    return np.concatenate(cols, axis=1)


class ContentExtractor:
    """Toy BN provider: penultimate layer of a frame-wise unit classifier."""

    def __init__(self, cfg: ExtractorConfig = None):
        self.cfg = cfg or ExtractorConfig()
        self.net = None
        self.mean = None
        self.std = None
        self.val_accuracy = None

    @property
    def ready(self) -> bool:
        return self.net is not None

    def fit(self, train_mels, train_labels, val_mels, val_labels,
            n_classes: int, mel_stats, seed: int) -> float:
        """Train on frame-labeled mels; returns held-out frame accuracy."""
        cfg = self.cfg
        torch.manual_seed(seed)
        self.mean, self.std = mel_stats
        in_dim = train_mels[0].shape[1] * (2 * cfg.context_frames + 1)
        self.net = _FrameClassifier(in_dim, cfg.content_hidden, n_classes)

        def frames_of(mels, labels):
            xs = [_stack_context((m - self.mean) / self.std, cfg.context_frames)
                  for m in mels]
            return (np.concatenate(xs).astype(np.float32),
                    np.concatenate(labels).astype(np.int64))

        x_train, y_train = frames_of(train_mels, train_labels)
        x_val, y_val = frames_of(val_mels, val_labels)
        xt = torch.from_numpy(x_train)
        yt = torch.from_numpy(y_train)
        opt = torch.optim.Adam(self.net.parameters(), lr=cfg.content_lr)
        loss_fn = nn.CrossEntropyLoss()
        rng = np.random.default_rng(seed)
        self.net.train()
        for _ in range(cfg.content_epochs):
            order = rng.permutation(len(xt))
            for start in range(0, len(xt), cfg.content_batch):
                idx = order[start:start + cfg.content_batch]
                opt.zero_grad()
                loss = loss_fn(self.net(xt[idx]), yt[idx])
                loss.backward()
                opt.step()
        self.net.eval()
        with torch.no_grad():
            pred = self.net(torch.from_numpy(x_val)).argmax(dim=1).numpy()
        self.val_accuracy = float((pred == y_val).mean())
        return self.val_accuracy

    def extract(self, m, utt_id=None) -> BNFeature:
        if not self.ready:
            raise NotReadyError("content extractor has not been trained")
        mel = _mel_values(m)
        x = _stack_context((mel - self.mean) / self.std, self.cfg.context_frames)
        self.net.eval()
        with torch.no_grad():
            _, hidden = self.net(torch.from_numpy(x.astype(np.float32)),
                                 return_hidden=True)
        values = hidden.numpy().astype(np.float32)
        # utterance-level mean normalization: keeps the frame-to-frame
        # content detail while stripping per-utterance speaker bias
        return BNFeature(values=values - values.mean(axis=0, keepdims=True))

    def save(self, path) -> None:
        if not self.ready:
            raise NotReadyError("cannot save an untrained content extractor")
        tensors = {f"net.{k}": v.detach().numpy() for k, v in
                   self.net.state_dict().items()}
        tensors["mel_mean"] = self.mean
        tensors["mel_std"] = self.std
        meta = {"kind": "toy_bn", "version": VERSION,
                "context_frames": self.cfg.context_frames,
                "hidden": self.cfg.content_hidden,
                "pinch": self.net.pinch.out_features,
                "n_classes": self.net.head.out_features,
                "val_accuracy": self.val_accuracy}
        container.save(path, tensors, meta)

    @classmethod
    def load(cls, path, cfg: ExtractorConfig = None) -> "ContentExtractor":
        tensors, meta = container.load(path)
        obj = cls(cfg)
        obj.cfg.context_frames = int(meta["context_frames"])
        obj.cfg.content_hidden = int(meta["hidden"])
        in_dim = tensors["net.fc1.weight"].shape[1]
        obj.net = _FrameClassifier(in_dim, obj.cfg.content_hidden,
                                   int(meta["n_classes"]),
                                   pinch=int(meta["pinch"]))
        obj.net.load_state_dict({k[4:]: torch.from_numpy(v)
                                 for k, v in tensors.items() if k.startswith("net.")})
        obj.net.eval()
        obj.mean = tensors["mel_mean"]
        obj.std = tensors["mel_std"]
        obj.val_accuracy = meta.get("val_accuracy")
        return obj


class SSLQuantizer:
    """Toy discrete provider: one k-means codebook per mel band group."""

    def __init__(self, cfg: ExtractorConfig = None):
        self.cfg = cfg or ExtractorConfig()
        self.centers = None           # list of (codebook_size, band_dim)
        self.mean = None
        self.std = None

    @property
    def ready(self) -> bool:
        return self.centers is not None

    @property
    def codebook_sizes(self) -> tuple:
        return tuple([self.cfg.codebook_size] * SSL_GROUPS)

    def _bands(self, mel: np.ndarray):
        half = mel.shape[1] // 2
        return mel[:, :half], mel[:, half:]

    def _normalize(self, mel: np.ndarray) -> np.ndarray:
        # corpus z-score plus utterance mean removal: the codes keep pitch
        # and envelope movement but shed the utterance's average timbre
        z = (mel - self.mean) / self.std
        return z - z.mean(axis=0, keepdims=True)

    def fit(self, mels, mel_stats, seed: int) -> None:
        self.mean, self.std = mel_stats
        frames = np.concatenate([self._normalize(m) for m in mels])
        rng = np.random.default_rng(seed)
        if len(frames) > self.cfg.kmeans_max_frames:
            keep = rng.choice(len(frames), self.cfg.kmeans_max_frames, replace=False)
            frames = frames[np.sort(keep)]
        self.centers = []
        for g, band in enumerate(self._bands(frames)):
            km = KMeans(n_clusters=self.cfg.codebook_size, n_init=1,
                        random_state=seed + g, algorithm="lloyd", max_iter=100)
            km.fit(band)
            self.centers.append(km.cluster_centers_.astype(np.float64))

    def extract(self, m, utt_id=None) -> SSLIndices:
        if not self.ready:
            raise NotReadyError("SSL codebooks have not been fitted")
        mel = self._normalize(_mel_values(m))
        cols = []
        for band, centers in zip(self._bands(mel), self.centers):
            d2 = ((band[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            cols.append(np.argmin(d2, axis=1))
        return SSLIndices(values=np.stack(cols, axis=1).astype(np.int64),
                          codebook_sizes=self.codebook_sizes)

    def save(self, path) -> None:
        if not self.ready:
            raise NotReadyError("cannot save unfitted SSL codebooks")
        tensors = {"mel_mean": self.mean, "mel_std": self.std}
        for g, c in enumerate(self.centers):
            tensors[f"centers{g}"] = c
        container.save(path, tensors, {"kind": "toy_ssl", "version": VERSION,
                                       "codebook_size": self.cfg.codebook_size})

    @classmethod
    def load(cls, path, cfg: ExtractorConfig = None) -> "SSLQuantizer":
        tensors, meta = container.load(path)
        obj = cls(cfg)
        obj.cfg.codebook_size = int(meta["codebook_size"])
        obj.mean = tensors["mel_mean"]
        obj.std = tensors["mel_std"]
        obj.centers = [tensors[f"centers{g}"] for g in range(SSL_GROUPS)]
        return obj


class ExternalFeatureSource:
    """Provider backed by precomputed per-utterance feature archives.

    Each file <dir>/<utt_id>.feat holds one tensor named "values" of shape
    (T, D) (float) or (T, groups) (integer indices).
    """

    def __init__(self, directory, kind: str, codebook_sizes: tuple = (64, 64)):
        self.directory = Path(directory)
        self.kind = kind              # "bn" or "ssl"
        self._codebook_sizes = codebook_sizes

    @property
    def ready(self) -> bool:
        return self.directory.is_dir()

    def extract(self, m, utt_id=None):
        if utt_id is None:
            raise InvalidInputError("external feature source needs an utterance id")
        path = self.directory / f"{utt_id}.feat"
        if not path.exists():
            raise NotReadyError(f"no precomputed features at {path}")
        tensors, _ = container.load(path)
        values = tensors["values"]
        T = _mel_values(m).shape[0]
        if values.shape[0] != T:
            raise LengthMismatchError(
                f"external features for {utt_id} have {values.shape[0]} frames, "
                f"mel has {T}")
        if self.kind == "bn":
            return BNFeature(values=values.astype(np.float32))
        return SSLIndices(values=values.astype(np.int64),
                          codebook_sizes=self._codebook_sizes)


def codebook_utilization(quantizer: SSLQuantizer, mels) -> list:
    """Fraction of codebook entries used at least once, per group."""
    used = [np.zeros(size, dtype=bool) for size in quantizer.codebook_sizes]
    for m in mels:
        idx = quantizer.extract(m).values
        for g in range(SSL_GROUPS):
            used[g][np.unique(idx[:, g])] = True
    return [float(u.mean()) for u in used]


def _probe_features(kind: str, bundle: FeatureBundle, mel_stats) -> np.ndarray:
    if kind == "mel":
        mean, std = mel_stats
        return (bundle.mel - mean) / std
    if kind == "bn":
        return bundle.bn
    if kind == "ssl":
        onehot = np.zeros((bundle.num_frames, 64 * SSL_GROUPS), dtype=np.float64)
        for g in range(SSL_GROUPS):
            onehot[np.arange(bundle.num_frames), g * 64 + bundle.ssl[:, g]] = 1.0
        return onehot
    raise InvalidInputError(f"unknown probe feature kind {kind!r}")


def probe_richness(feature_kind: str, bundles_train, bundles_test,
                   speakers_train, speakers_test, mel_stats,
                   seed: int = 0, max_frames: int = 30000) -> RichnessReport:
    """How much prosody and speaker information a feature kind retains.

    Ridge regressors predict frame-level lf0/energy; a logistic probe on
    utterance-mean features predicts the speaker. All metrics are held out.
    """
    speakers = sorted(set(speakers_train))
    if len(speakers) < 2:
        raise InvalidInputError("richness probe needs at least 2 speakers")
    spk_index = {s: i for i, s in enumerate(speakers)}

    def collect(bundles, speaker_ids):
        feats, lf0, energy, means, ys = [], [], [], [], []
        for b, s in zip(bundles, speaker_ids):
            f = _probe_features(feature_kind, b, mel_stats)
            feats.append(f)
            lf0.append(b.lf0)
            energy.append(b.energy)
            means.append(f.mean(axis=0))
            ys.append(spk_index[s])
        return (np.concatenate(feats), np.concatenate(lf0),
                np.concatenate(energy), np.stack(means), np.asarray(ys))

    x_tr, lf0_tr, en_tr, mean_tr, y_tr = collect(bundles_train, speakers_train)
    x_te, lf0_te, en_te, mean_te, y_te = collect(bundles_test, speakers_test)

    rng = np.random.default_rng(seed)
    if len(x_tr) > max_frames:
        keep = np.sort(rng.choice(len(x_tr), max_frames, replace=False))
        x_tr, lf0_tr, en_tr = x_tr[keep], lf0_tr[keep], en_tr[keep]

    mse = {}
    for name, target_tr, target_te in (("lf0", lf0_tr, lf0_te),
                                       ("energy", en_tr, en_te)):
        reg = Ridge(alpha=1.0)
        reg.fit(x_tr, target_tr)
        mse[name] = float(np.mean((reg.predict(x_te) - target_te) ** 2))

    clf = LogisticRegression(max_iter=2000)
    clf.fit(mean_tr, y_tr)
    acc = float((clf.predict(mean_te) == y_te).mean())
    return RichnessReport(feature_kind=feature_kind, mse_lf0=mse["lf0"],
                          mse_energy=mse["energy"], speaker_accuracy=acc)
