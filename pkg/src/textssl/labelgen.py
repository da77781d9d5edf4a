"""Frame-label generation for masked pre-training.

Three routes produce one discrete label per 8-px frame:

* ``fq``    -- kMeans over features from an existing frame-aligned encoder;
* ``vqvae`` -- codeword indices of a VQ-VAE encoder;
* ``pqae``  -- kMeans over features of a plain (unquantized) autoencoder.

Feature store layout (``*.feat``), repeated once per line::

    uint32 little-endian header length N
    N bytes of UTF-8 JSON: {"id": str, "L": int, "D": int}
    L*D float32 little-endian values, row-major (frame-major)

Label manifest: ``id<TAB>space-separated labels`` per line plus a sidecar
``<manifest>.meta.json`` with ``k``, ``method`` and the encoder hash.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .backbone import SequenceModel, prepare_input
from .dataset import LINE_HEIGHT, SUBSAMPLE, Corpus, pad_batch

logger = logging.getLogger(__name__)


class MissingAssetError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# feature store

class FeatureStore(dict):
    """Mapping line id -> (L, D) float32 frame features."""

    @property
    def dim(self) -> int:
        return next(iter(self.values())).shape[1]

    @property
    def total_frames(self) -> int:
        return sum(v.shape[0] for v in self.values())

    def stacked(self) -> np.ndarray:
        if not self:
            return np.zeros((0, 0), dtype=np.float32)
        return np.concatenate(list(self.values()), axis=0)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            for line_id, feats in self.items():
                feats = np.ascontiguousarray(feats, dtype="<f4")
                header = json.dumps({"id": line_id, "L": feats.shape[0], "D": feats.shape[1]}).encode("utf-8")
                f.write(struct.pack("<I", len(header)))
                f.write(header)
                f.write(feats.tobytes())
        return path

    @classmethod
    def load(cls, path) -> "FeatureStore":
        store = cls()
        with open(path, "rb") as f:
            while True:
                raw = f.read(4)
                if not raw:
                    break
                (n,) = struct.unpack("<I", raw)
                header = json.loads(f.read(n).decode("utf-8"))
                count = header["L"] * header["D"]
                data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
                store[header["id"]] = data.reshape(header["L"], header["D"]).astype(np.float32)
        return store


def frame_encoder(model):
    """Resolve the frame-aligned feature function of a model or autoencoder."""
    if isinstance(model, SequenceModel):
        enc = model.embed
    elif isinstance(model, ConvAutoencoder):
        enc = model.encode
    elif callable(model):
        enc = model
    else:
        raise TypeError(f"cannot extract frame features from {type(model).__name__}")
    owner = getattr(enc, "__self__", None)  # bound methods such as ``ae.encode``
    factor = next((getattr(o, "subsample_factor") for o in (model, enc, owner)
                   if hasattr(o, "subsample_factor")), None)
    if factor != SUBSAMPLE:
        raise ValueError(f"encoder subsampling factor {factor} does not match the backbone's {SUBSAMPLE}")
    return enc


@torch.no_grad()
def extract_features(encoder, corpus: Corpus, batch_size: int = 32) -> FeatureStore:
    """Run ``encoder`` over every line; one feature vector per 8-px frame."""
    fn = frame_encoder(encoder)
    was_training = getattr(encoder, "training", False)
    if hasattr(encoder, "eval"):
        encoder.eval()
    store = FeatureStore()
    entries = list(corpus)
    # batching by width keeps padding (and its effect on conv features) out of the real frames
    order = sorted(range(len(entries)), key=lambda i: entries[i].image.width)
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            groups: dict[int, list[int]] = {}
            for i in idx:
                groups.setdefault(entries[i].image.frames, []).append(i)
            for _, members in groups.items():
                px, frames = pad_batch([entries[i].image for i in members])
                feats = fn(torch.from_numpy(px)).float().numpy()
                for row, i in enumerate(members):
                    store[entries[i].id] = np.ascontiguousarray(feats[row, : frames[row]])
    finally:
        if was_training:
            encoder.train()
    return FeatureStore((e.id, store[e.id]) for e in entries)


def sample_fit_set(store: FeatureStore, k: int, seed: int = 0, per_class: int = 100) -> np.ndarray:
    """Uniform sample (without replacement) of ``k * per_class`` frame vectors."""
    data = store.stacked() if isinstance(store, FeatureStore) else np.asarray(store)
    if data.shape[0] == 0:
        raise ValueError("feature store is empty")
    n = k * per_class
    if data.shape[0] <= n:
        if data.shape[0] < n:
            logger.warning("feature store has %d vectors < k*%d = %d; using all", data.shape[0], per_class, n)
        return data.copy()
    idx = np.random.default_rng(seed).choice(data.shape[0], size=n, replace=False)
    return data[np.sort(idx)]


# --------------------------------------------------------------------------
# kMeans

@dataclass
class Codebook:
    centroids: np.ndarray
    source: str = "kmeans"
    inertia: Optional[float] = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a k x D matrix")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            np.savez(f, centroids=self.centroids, source=self.source,
                     inertia=np.nan if self.inertia is None else self.inertia)
        return path

    @classmethod
    def load(cls, path) -> "Codebook":
        with np.load(path) as z:
            inertia = float(z["inertia"])
            return cls(z["centroids"], str(z["source"]), None if math.isnan(inertia) else inertia)


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, (N, D) x (K, D) -> (N, K)."""
    out = np.empty((x.shape[0], c.shape[0]), dtype=np.result_type(x, c))
    rows = max(1, (1 << 22) // max(1, c.shape[0] * x.shape[1]))
    for s in range(0, x.shape[0], rows):
        diff = x[s:s + rows, None, :] - c[None, :, :]
        out[s:s + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _fast_sq_distances(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new centre drawn proportionally to squared distance."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(n)]
    closest = _fast_sq_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(np.cumsum(closest), rng.random() * total))
            i = min(i, n - 1)
        centers[j] = x[i]
        closest = np.minimum(closest, _fast_sq_distances(x, centers[j:j + 1])[:, 0])
    return centers


def inertia(x: np.ndarray, centroids: np.ndarray) -> float:
    return float(_fast_sq_distances(x, centroids).min(axis=1).sum())


def fit_kmeans(sample: np.ndarray, k: int, epochs: int = 100, batch: int = 16384, seed: int = 0,
               normalize: bool = False) -> Codebook:
    """Mini-batch kMeans (per-centre 1/count learning rates) with k-means++ init.

    Each epoch is one shuffled pass over ``sample``. A centre that receives
    no point during an epoch is moved to the farthest point of the largest
    cluster of that epoch.
    """
    x = np.asarray(sample, dtype=np.float64)
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} needs at least k samples (have {n})")
    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    counts = np.zeros(k)
    history = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        epoch_counts = np.zeros(k, dtype=np.int64)
        epoch_label = np.empty(n, dtype=np.int64)
        epoch_dist = np.empty(n)
        for s in range(0, n, batch):
            idx = perm[s:s + batch]
            xb = x[idx]
            d = _fast_sq_distances(xb, centers)
            lab = d.argmin(axis=1)
            epoch_label[idx] = lab
            epoch_dist[idx] = d[np.arange(len(idx)), lab]
            for j in np.unique(lab):
                pts = xb[lab == j]
                m = pts.shape[0]
                counts[j] += m
                # sequential 1/count updates over the m points collapse to this closed form
                centers[j] += (pts.sum(axis=0) - m * centers[j]) / counts[j]
            epoch_counts += np.bincount(lab, minlength=k)
        empty = np.flatnonzero(epoch_counts == 0)
        for j in empty:
            big = int(epoch_counts.argmax())
            members = np.flatnonzero(epoch_label == big)
            far = members[epoch_dist[members].argmax()]
            centers[j] = x[far]
            epoch_dist[far] = 0.0
            counts[j] = 1
        history.append(inertia(x, centers))
    return Codebook(centers, "kmeans", history[-1] if history else inertia(x, centers), history)


def lloyd(x: np.ndarray, centroids: np.ndarray, iterations: int = 20) -> tuple[np.ndarray, list[float]]:
    """Full-batch Lloyd iterations; returns final centroids and inertia after each assignment."""
    c = np.array(centroids, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    history = []
    for _ in range(iterations):
        d = _fast_sq_distances(x, c)
        lab = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), lab].sum()))
        for j in range(c.shape[0]):
            members = x[lab == j]
            if len(members):
                c[j] = members.mean(axis=0)
    return c, history


def assign_labels(codebook, features: np.ndarray) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties go to the lowest index."""
    c = codebook.centroids if isinstance(codebook, Codebook) else np.asarray(codebook)
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[1] != c.shape[1]:
        raise ValueError(f"feature dim {f.shape[-1]} does not match centroid dim {c.shape[1]}")
    if f.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return sq_distances(f.astype(np.float64), c.astype(np.float64)).argmin(axis=1)


# --------------------------------------------------------------------------
# autoencoders

def vq_quantize(latent: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest codeword (lowest index on ties) with a straight-through gradient.

    Returns the quantized tensor (same shape as ``latent``) and indices. The
    forward value is the codeword; the backward pass treats quantization as
    identity.
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    if latent.shape[-1] != codebook.shape[1]:
        raise ValueError(f"latent dim {latent.shape[-1]} != codebook dim {codebook.shape[1]}")
    flat = latent.reshape(-1, latent.shape[-1])
    with torch.no_grad():
        d = (flat[:, None, :] - codebook[None, :, :]).pow(2).sum(-1)
        idx = d.argmin(dim=1)
    q = codebook[idx].reshape(latent.shape)
    return latent + (q - latent).detach(), idx.reshape(latent.shape[:-1])


class VectorQuantizer(nn.Module):
    """Codebook bottleneck with codebook and commitment losses."""

    def __init__(self, size: int, dim: int, commitment: float = 0.25):
        super().__init__()
        self.commitment = commitment
        self.codebook = nn.Parameter(torch.randn(size, dim) * 0.1)

    @torch.no_grad()
    def init_from(self, latents: torch.Tensor, generator: Optional[torch.Generator] = None):
        """Uniform draws within mean +- std of observed encoder outputs, per dimension."""
        mean, std = latents.mean(0), latents.std(0)
        u = torch.rand(self.codebook.shape, generator=generator) * 2 - 1
        self.codebook.copy_(mean + u * std)

    def forward(self, z):
        zq_st, idx = vq_quantize(z, self.codebook)
        q = self.codebook[idx]
        codebook_loss = F.mse_loss(q, z.detach())
        commit_loss = F.mse_loss(z, q.detach())
        return zq_st, idx, codebook_loss + self.commitment * commit_loss


class ConvAutoencoder(nn.Module):
    """VGG-style autoencoder, frame-aligned with the backbone.

    Encoder: 8 conv layers (2 per block, ReLU), 2x2 max-pool after the first
    three blocks, the 5-row map folded into one ``latent_dim`` vector per frame.
    The decoder mirrors it with nearest upsampling in place of pooling.
    """

    subsample_factor = SUBSAMPLE

    def __init__(self, channels=(16, 32, 64, 64), latent_dim: int = 64, codebook_size: Optional[int] = None):
        super().__init__()
        self.channels = tuple(channels)
        self.latent_dim = latent_dim
        self.codebook_size = codebook_size
        enc, cin = [], 1
        for k, c in enumerate(channels):
            enc += [nn.Conv2d(cin, c, 3, padding=1), nn.ReLU(inplace=True),
                    nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True)]
            if k < 3:
                enc.append(nn.MaxPool2d(2))
            cin = c
        self.encoder = nn.Sequential(*enc)
        rows = LINE_HEIGHT // SUBSAMPLE
        self.to_latent = nn.Linear(channels[-1] * rows, latent_dim)
        self.from_latent = nn.Linear(latent_dim, channels[-1] * rows)
        dec = []
        rev = list(channels[::-1])
        for k, c in enumerate(rev):
            last = k == len(rev) - 1
            cout = 1 if last else rev[k + 1]
            dec += [nn.Conv2d(c, c, 3, padding=1), nn.ReLU(inplace=True), nn.Conv2d(c, cout, 3, padding=1)]
            if not last:
                dec += [nn.ReLU(inplace=True), nn.Upsample(scale_factor=2, mode="nearest")]
        self.decoder = nn.Sequential(*dec)
        self.quantizer = VectorQuantizer(codebook_size, latent_dim) if codebook_size else None

    @property
    def quantized(self) -> bool:
        return self.quantizer is not None

    def encode(self, x):
        """(B, 40, W) pixels -> (B, ceil(W/8), latent_dim) continuous latents."""
        y = self.encoder(prepare_input(x))
        b, c, h, l = y.shape
        return self.to_latent(y.permute(0, 3, 1, 2).reshape(b, l, c * h))

    def decode(self, z):
        b, l, _ = z.shape
        rows = LINE_HEIGHT // SUBSAMPLE
        y = self.from_latent(z).reshape(b, l, self.channels[-1], rows).permute(0, 2, 3, 1)
        # network works on inverted pixels; map back to paper-white = 1
        return 1.0 - torch.sigmoid(self.decoder(y)).squeeze(1)

    def forward(self, x):
        """Returns (reconstruction, indices or None, quantization loss)."""
        z = self.encode(x)
        if self.quantizer is None:
            return self.decode(z), None, z.new_zeros(())
        zq, idx, qloss = self.quantizer(z)
        return self.decode(zq), idx, qloss

    @torch.no_grad()
    def codes(self, x) -> torch.Tensor:
        if self.quantizer is None:
            raise ValueError("autoencoder has no quantizer")
        return vq_quantize(self.encode(x), self.quantizer.codebook)[1]


def save_autoencoder(model: ConvAutoencoder, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"kind": "autoencoder", "channels": list(model.channels), "latent_dim": model.latent_dim,
                "codebook_size": model.codebook_size, "state_dict": model.state_dict()}, path)
    return path


def load_autoencoder(path) -> ConvAutoencoder:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "autoencoder":
        raise ValueError(f"{path} is not an autoencoder checkpoint")
    model = ConvAutoencoder(payload["channels"], payload["latent_dim"], payload["codebook_size"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def _crop_lines(lines, width, rng):
    out = []
    for l in lines:
        if l.width > width:
            x0 = int(rng.integers(0, (l.width - width) // SUBSAMPLE + 1)) * SUBSAMPLE
            out.append(type(l)(l.id, l.pixels[:, x0:x0 + width]))
        else:
            out.append(l)
    return out


@torch.no_grad()
def reconstruction_mse(model: ConvAutoencoder, corpus: Corpus, batch_size: int = 32) -> float:
    model.eval()
    total, count = 0.0, 0
    entries = list(corpus)
    for s in range(0, len(entries), batch_size):
        lines = [e.image for e in entries[s:s + batch_size]]
        px, _ = pad_batch(lines)
        x = torch.from_numpy(px)
        rec, _, _ = model(x)
        for i, l in enumerate(lines):
            err = (rec[i, :, : l.width] - x[i, :, : l.width]).pow(2)
            total += float(err.sum())
            count += err.numel()
    return total / count


@torch.no_grad()
def codebook_usage(model: ConvAutoencoder, corpus: Corpus, batch_size: int = 32) -> np.ndarray:
    """Histogram of codeword indices over every frame of ``corpus``."""
    hist = np.zeros(model.codebook_size, dtype=np.int64)
    model.eval()
    for line_id, feats in extract_features(model, corpus, batch_size).items():
        idx = vq_quantize(torch.from_numpy(feats), model.quantizer.codebook)[1].numpy()
        hist += np.bincount(idx, minlength=model.codebook_size)
    return hist


def train_autoencoder(corpus: Corpus, quantized: bool = False, codebook_size: int = 1024, schedule=None,
                      held_out: Optional[Corpus] = None, seed: int = 0, channels=(16, 32, 64, 64),
                      latent_dim: int = 64, crop_width: int = 256, augmentation: str = "visual",
                      metrics=None) -> tuple[ConvAutoencoder, dict]:
    """Train a (VQ-)autoencoder with MSE reconstruction of augmented crops.

    ``schedule`` is a :class:`textssl.schedule.Schedule`; defaults to the AE
    rows of the training table at desk scale. Returns the model (eval mode)
    and a history with held-out MSE before and after training plus, for the
    quantized variant, the codebook usage histogram.
    """
    from .augment import AugmentConfig, _visual
    from .schedule import schedule_from_table, make_optimizer

    schedule = schedule or schedule_from_table("ae", 0.01)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ConvAutoencoder(channels, latent_dim, codebook_size if quantized else None)
    held_out = held_out if held_out is not None else corpus
    history = {"initial_mse": reconstruction_mse(model, held_out)}
    aug = AugmentConfig.named(augmentation) if isinstance(augmentation, str) else augmentation

    if quantized:
        # codebook statistics from one pass of the untrained encoder
        with torch.no_grad():
            lat = np.concatenate(list(extract_features(model, corpus).values()))
        model.quantizer.init_from(torch.from_numpy(lat), torch.Generator().manual_seed(seed))

    opt, sched = make_optimizer(model.parameters(), schedule)
    model.train()
    for step in range(schedule.total_iterations):
        bs = schedule.batch_size_at(step)
        idx = rng.choice(len(corpus), size=min(bs, len(corpus)), replace=len(corpus) < bs)
        lines = _crop_lines([corpus[int(i)].image for i in idx], crop_width, rng)
        lines = [type(l)(l.id, _visual(l.pixels, np.random.default_rng(int(rng.integers(2**31))), aug)) for l in lines]
        px, _ = pad_batch(lines)
        x = torch.from_numpy(px)
        rec, _, qloss = model(x)
        loss = F.mse_loss(rec, x) + qloss
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"autoencoder loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if metrics is not None and (step % 50 == 0 or step == schedule.total_iterations - 1):
            metrics.write(iteration=step, loss=loss.item(), quant_loss=qloss.item())
    history["iterations"] = sched.last_epoch
    model.eval()
    history["final_mse"] = reconstruction_mse(model, held_out)
    if quantized:
        usage = codebook_usage(model, held_out)
        history["codebook_usage"] = usage
        history["codewords_used"] = int((usage > 0).sum())
    return model, history


# --------------------------------------------------------------------------
# label manifests

@dataclass
class LabelManifest:
    labels: dict
    k: int
    method: str
    encoder_hash: str = ""

    def __post_init__(self):
        self.labels = {i: np.asarray(v, dtype=np.int64) for i, v in self.labels.items()}
        for line_id, v in self.labels.items():
            if v.size and (v.min() < 0 or v.max() >= self.k):
                raise ValueError(f"labels of {line_id!r} fall outside [0, {self.k})")

    def __getitem__(self, line_id):
        return self.labels[line_id]

    def __len__(self):
        return len(self.labels)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line_id, v in self.labels.items():
                f.write(f"{line_id}\t{' '.join(str(int(x)) for x in v)}\n")
        meta = {"k": self.k, "method": self.method, "encoder_hash": self.encoder_hash}
        Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "LabelManifest":
        meta = json.loads(Path(str(path) + ".meta.json").read_text())
        labels = {}
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, 1):
                raw = raw.rstrip("\n")
                if not raw:
                    continue
                line_id, _, rest = raw.partition("\t")
                try:
                    labels[line_id] = np.array([int(t) for t in rest.split()], dtype=np.int64)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: malformed label record") from None
        return cls(labels, meta["k"], meta["method"], meta.get("encoder_hash", ""))


def _state_hash(module) -> str:
    import hashlib
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def generate_labels(method: str, corpus: Corpus, assets: Mapping) -> LabelManifest:
    """Label every line of ``corpus``.

    ``assets`` keys by method: ``fq`` needs ``encoder`` (a frame-aligned
    model) and ``codebook``; ``vqvae`` needs a quantized ``autoencoder``;
    ``pqae`` needs an unquantized ``autoencoder`` and ``codebook`` (fitted on
    that autoencoder's features).
    """
    method = method.lower()
    if method == "fq":
        _require(assets, method, "encoder", "codebook")
        return _quantize_features(assets["encoder"], assets["codebook"], corpus, method)
    if method == "pqae":
        _require(assets, method, "autoencoder", "codebook")
        if assets["autoencoder"].quantized:
            raise MissingAssetError("pqae expects an unquantized autoencoder")
        return _quantize_features(assets["autoencoder"], assets["codebook"], corpus, method)
    if method == "vqvae":
        _require(assets, method, "autoencoder")
        ae = assets["autoencoder"]
        if not ae.quantized:
            raise MissingAssetError("vqvae labels need an autoencoder with a quantizer")
        store = extract_features(ae, corpus)
        cb = ae.quantizer.codebook.detach()
        labels = {i: vq_quantize(torch.from_numpy(f), cb)[1].numpy() for i, f in store.items()}
        return LabelManifest(labels, ae.codebook_size, method, _state_hash(ae))
    raise ValueError(f"unknown label method {method!r}; expected fq, vqvae or pqae")


def _require(assets, method, *keys):
    missing = [k for k in keys if assets.get(k) is None]
    if missing:
        raise MissingAssetError(f"method {method!r} is missing assets: {', '.join(missing)}")


def _quantize_features(encoder, codebook: Codebook, corpus: Corpus, method: str) -> LabelManifest:
    store = extract_features(encoder, corpus)
    labels = {i: assign_labels(codebook, f) for i, f in store.items()}
    return LabelManifest(labels, codebook.k, method, _state_hash(encoder))
