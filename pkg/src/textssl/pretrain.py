"""Self-supervised pre-training loops.

Masked label prediction: 40x8 input slices are replaced by uniform noise with
probability ``p`` and the model classifies the frame label at those slices.

Joint embedding: two augmented, frame-shifted crops of a line go through the
same model; VICReg is computed over all corresponding frames of the batch,
NT-Xent separately within each line.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentConfig, ViewPair, make_view_pair
from .backbone import SequenceModel, batch_tensor
from .dataset import LINE_HEIGHT, SUBSAMPLE, Corpus, LineImage, pad_batch
from .schedule import MetricsStream, Schedule, make_optimizer

logger = logging.getLogger(__name__)


class LabelAlignmentError(ValueError):
    pass


# --------------------------------------------------------------------------
# masking

@dataclass(frozen=True)
class MaskSpec:
    masked_frames: tuple[int, ...]
    p: float = 0.2


def mask_slices(image, p: float = 0.2, seed: int = 0) -> tuple[np.ndarray, MaskSpec]:
    """Replace each 40x8 slice by U[0,1] noise independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"masking probability {p} outside [0, 1]")
    px = image.pixels if isinstance(image, LineImage) else np.asarray(image, dtype=np.float32)
    if px.shape[0] != LINE_HEIGHT or px.shape[1] % SUBSAMPLE:
        raise ValueError(f"expected height {LINE_HEIGHT} and width a multiple of {SUBSAMPLE}, got {px.shape}")
    masked, mask = mask_batch(px[None], np.array([px.shape[1] // SUBSAMPLE]), p, np.random.default_rng(seed))
    return masked[0], MaskSpec(tuple(int(i) for i in np.flatnonzero(mask[0])), p)


def mask_batch(px: np.ndarray, frames: np.ndarray, p: float, rng: np.random.Generator):
    """Batch masking of (B, 40, W) pixels; frames past each line's length stay unmasked."""
    b, _, w = px.shape
    n = w // SUBSAMPLE
    mask = rng.random((b, n)) < p
    mask &= np.arange(n)[None, :] < np.asarray(frames)[:, None]
    out = px.copy()
    noise = rng.random(px.shape, dtype=np.float32)
    pix_mask = np.repeat(mask, SUBSAMPLE, axis=1)[:, None, :]
    np.copyto(out, noise, where=np.broadcast_to(pix_mask, out.shape))
    return out, mask


# --------------------------------------------------------------------------
# top-k

class TopKReport(NamedTuple):
    top1: float
    top3: float
    top10: float
    count: int


def label_ranks(logits, labels) -> np.ndarray:
    """0-based rank of the true label; equal logits rank the lower class first."""
    lg = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    lab = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    true = lg[np.arange(len(lab)), lab][:, None]
    cls = np.arange(lg.shape[1])[None, :]
    return (lg > true).sum(1) + ((lg == true) & (cls < lab[:, None])).sum(1)


def topk_errors(logits, labels, ks: Sequence[int]) -> dict:
    """Fraction of frames whose true label is not among the ``k`` highest logits, per k."""
    if len(labels) == 0:
        raise ValueError("top-k error of an empty set is undefined")
    r = label_ranks(logits, labels)
    return {k: float((r >= k).mean()) for k in ks}


def topk_error(logits, labels) -> TopKReport:
    e = topk_errors(logits, labels, (1, 3, 10))
    return TopKReport(e[1], e[3], e[10], len(labels))


# --------------------------------------------------------------------------
# losses

class VICRegTerms(NamedTuple):
    total: torch.Tensor
    invariance: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor


def _off_diagonal_sq(cov: torch.Tensor) -> torch.Tensor:
    return cov.pow(2).sum() - cov.diagonal().pow(2).sum()


def vicreg_loss(z_a: torch.Tensor, z_b: torch.Tensor, inv_weight: float = 25.0, var_weight: float = 25.0,
                cov_weight: float = 1.0, gamma: float = 1.0, eps: float = 1e-4) -> VICRegTerms:
    """VICReg over N corresponding rows of ``z_a`` and ``z_b`` (N x D).

    invariance: mean squared difference; variance: hinge ``gamma - sqrt(var + eps)``
    per dimension, averaged over dims and over the two branches; covariance:
    squared off-diagonal covariance entries divided by D, summed over branches.
    """
    n, d = z_a.shape
    if n < 2:
        raise ValueError("VICReg needs at least two pairs")
    inv = F.mse_loss(z_a, z_b)
    za = z_a - z_a.mean(0)
    zb = z_b - z_b.mean(0)
    std_a = torch.sqrt(za.var(0) + eps)
    std_b = torch.sqrt(zb.var(0) + eps)
    var = (F.relu(gamma - std_a).mean() + F.relu(gamma - std_b).mean()) / 2
    cov_a = za.T @ za / (n - 1)
    cov_b = zb.T @ zb / (n - 1)
    cov = _off_diagonal_sq(cov_a) / d + _off_diagonal_sq(cov_b) / d
    total = inv_weight * inv + var_weight * var + cov_weight * cov
    return VICRegTerms(total, inv, var, cov)


def ntxent_loss(z_a: torch.Tensor, z_b: torch.Tensor, pairs, temperature: float = 0.1) -> torch.Tensor:
    """Symmetric NT-Xent within one line.

    ``pairs`` = (indices into A, indices into B) of corresponding frames. For
    an anchor in one view, the candidates are all frames of the other view;
    its corresponding frame is the positive, the rest are negatives.
    """
    a_idx, b_idx = (torch.as_tensor(np.asarray(p), dtype=torch.long) for p in pairs)
    if a_idx.numel() == 0:
        raise ValueError("empty overlap")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    na, nb = z_a.norm(dim=1), z_b.norm(dim=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm embedding cannot be normalized")
    ua, ub = z_a / na[:, None], z_b / nb[:, None]
    logits_ab = ua[a_idx] @ ub.T / temperature
    logits_ba = ub[b_idx] @ ua.T / temperature
    return (F.cross_entropy(logits_ab, b_idx) + F.cross_entropy(logits_ba, a_idx)) / 2


# --------------------------------------------------------------------------
# masked label prediction

@dataclass
class StepResult:
    loss: float
    report: Optional[TopKReport]
    skipped: bool = False


def _aligned_labels(lines: Sequence[LineImage], frames, labels, width_frames) -> torch.Tensor:
    out = torch.full((len(lines), width_frames), -100, dtype=torch.long)
    for i, (l, lab) in enumerate(zip(lines, labels)):
        lab = np.asarray(lab)
        if len(lab) != frames[i]:
            raise LabelAlignmentError(f"line {l.id!r}: {len(lab)} labels for {int(frames[i])} frames")
        out[i, : len(lab)] = torch.from_numpy(lab)
    return out


def masked_logits_loss(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor):
    """Cross-entropy restricted to masked frames; returns (loss, masked logits, masked labels)."""
    sel_logits = logits[mask]
    sel_labels = labels[mask]
    return F.cross_entropy(sel_logits, sel_labels), sel_logits, sel_labels


def masked_step(model: SequenceModel, optimizer, lines: Sequence[LineImage], labels: Sequence[np.ndarray],
                p: float, rng: np.random.Generator, scheduler=None) -> StepResult:
    """One optimisation step of masked label prediction on a batch of lines.

    ``labels[i]`` is the frame-label sequence of ``lines[i]``. A batch
    without masked frames is skipped (no update).
    """
    px, frames = pad_batch(lines)
    labels = _aligned_labels(lines, frames, labels, px.shape[2] // SUBSAMPLE)
    masked, mask = mask_batch(px, frames, p, rng)
    mask = torch.from_numpy(mask)
    if not mask.any():
        if scheduler is not None:
            scheduler.step()
        return StepResult(0.0, None, skipped=True)
    model.train()
    logits = model(torch.from_numpy(masked), torch.from_numpy(frames))
    k = logits.shape[-1]
    if int(labels[labels >= 0].max()) >= k:
        raise LabelAlignmentError(f"label index exceeds head output size {k}")
    loss, sel_logits, sel_labels = masked_logits_loss(logits, labels, mask)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepResult(loss.item(), topk_error(sel_logits.detach(), sel_labels))


def crop_with_labels(line: LineImage, labels: np.ndarray, crop_width: Optional[int], rng):
    """Frame-aligned random crop of a line and its labels."""
    if crop_width is None or line.width <= crop_width:
        return line, labels
    n = crop_width // SUBSAMPLE
    start = int(rng.integers(0, line.frames - n + 1))
    x0 = start * SUBSAMPLE
    return LineImage(line.id, line.pixels[:, x0:x0 + crop_width]), labels[start:start + n]


@torch.no_grad()
def masked_eval(model: SequenceModel, corpus: Corpus, label_manifest, p: float = 0.2, seed: int = 0,
                batch_size: int = 32) -> TopKReport:
    """Top-k error at masked positions of a held-out corpus with a fixed masking draw."""
    model.eval()
    rng = np.random.default_rng(seed)
    all_logits, all_labels = [], []
    entries = list(corpus)
    for s in range(0, len(entries), batch_size):
        lines = [e.image for e in entries[s:s + batch_size]]
        px, frames = pad_batch(lines)
        labels = _aligned_labels(lines, frames, [label_manifest[l.id] for l in lines], px.shape[2] // SUBSAMPLE)
        masked, mask = mask_batch(px, frames, p, rng)
        logits = model(torch.from_numpy(masked), torch.from_numpy(frames))
        m = torch.from_numpy(mask)
        all_logits.append(logits[m])
        all_labels.append(labels[m])
    return topk_error(torch.cat(all_logits), torch.cat(all_labels))


def train_masked(model: SequenceModel, corpus: Corpus, label_manifest, schedule: Schedule, p: float = 0.2,
                 crop_width: Optional[int] = 512, seed: int = 0, val: Optional[Corpus] = None,
                 metrics: Optional[MetricsStream] = None, log_every: int = 50) -> dict:
    """Masked label prediction over ``schedule``. Returns the training history."""
    for c in (corpus,) if val is None else (corpus, val):
        missing = [i for i in c.ids if i not in label_manifest.labels]
        if missing:
            raise LabelAlignmentError(f"{len(missing)} lines of {c.name!r} have no labels, e.g. {missing[0]!r}")
    if model.config.head.output_size != label_manifest.k:
        raise ValueError(f"head output {model.config.head.output_size} != label classes {label_manifest.k}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt, sched = make_optimizer(model.parameters(), schedule)
    history = {"loss": [], "top1": [], "skipped": 0}
    for step in range(schedule.total_iterations):
        bs = schedule.batch_size_at(step)
        idx = rng.choice(len(corpus), size=bs, replace=len(corpus) < bs)
        lines, labels = [], []
        for i in idx:
            e = corpus[int(i)]
            line, lab = crop_with_labels(e.image, label_manifest[e.id], crop_width, rng)
            lines.append(line)
            labels.append(lab)
        res = masked_step(model, opt, lines, labels, p, rng, sched)
        if res.skipped:
            history["skipped"] += 1
            continue
        history["loss"].append(res.loss)
        history["top1"].append(res.report.top1)
        if metrics is not None and step % log_every == 0:
            metrics.write(iteration=step, loss=res.loss, top1=res.report.top1, top3=res.report.top3,
                          top10=res.report.top10, lr=schedule.lr_at(step))
    history["iterations"] = sched.last_epoch
    if val is not None:
        rep = masked_eval(model, val, label_manifest, p, seed)
        history["val"] = rep._asdict()
        if metrics is not None:
            metrics.write(iteration=schedule.total_iterations, val_top1=rep.top1, val_top3=rep.top3,
                          val_top10=rep.top10)
    model.eval()
    return history


# --------------------------------------------------------------------------
# joint embedding

@dataclass(frozen=True)
class JointConfig:
    criterion: str = "vicreg"
    temperature: float = 0.1
    inv_weight: float = 25.0
    var_weight: float = 25.0
    cov_weight: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-4
    crop_width: int = 512
    crop_doubling_step: Optional[int] = None
    shift: bool = True

    def __post_init__(self):
        if self.criterion not in ("vicreg", "ntxent"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.crop_width % SUBSAMPLE:
            raise ValueError(f"crop width must be a multiple of {SUBSAMPLE}")

    def crop_width_at(self, step: int) -> int:
        if self.crop_doubling_step is not None and step >= self.crop_doubling_step:
            return 2 * self.crop_width
        return self.crop_width


def gather_pairs(out_a: torch.Tensor, out_b: torch.Tensor, pairs: Sequence[ViewPair]):
    """Stack corresponding frame embeddings of every pair in the batch."""
    za, zb = [], []
    for i, vp in enumerate(pairs):
        ia, ib = vp.pairs()
        za.append(out_a[i, torch.from_numpy(ia)])
        zb.append(out_b[i, torch.from_numpy(ib)])
    return torch.cat(za), torch.cat(zb)


def joint_loss(out_a: torch.Tensor, out_b: torch.Tensor, pairs: Sequence[ViewPair], config: JointConfig):
    """Criterion value and its breakdown for a batch of forwarded view pairs."""
    if config.criterion == "vicreg":
        za, zb = gather_pairs(out_a, out_b, pairs)
        t = vicreg_loss(za, zb, config.inv_weight, config.var_weight, config.cov_weight, config.gamma, config.eps)
        return t.total, {"invariance": float(t.invariance.detach()), "variance": float(t.variance.detach()),
                         "covariance": float(t.covariance.detach())}
    losses = [ntxent_loss(out_a[i], out_b[i], vp.pairs(), config.temperature) for i, vp in enumerate(pairs)]
    return torch.stack(losses).mean(), {}


def joint_step(model: SequenceModel, optimizer, pairs: Sequence[ViewPair], config: JointConfig,
               scheduler=None) -> tuple[float, dict]:
    """Forward both views through the same weights and apply the criterion."""
    model.train()
    xa, _ = batch_tensor([vp.view_a for vp in pairs])
    xb, _ = batch_tensor([vp.view_b for vp in pairs])
    out = model(torch.cat([xa, xb]))
    out_a, out_b = out[: len(pairs)], out[len(pairs):]
    loss, diag = joint_loss(out_a, out_b, pairs, config)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"joint loss became {loss.item()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    with torch.no_grad():
        za, _ = gather_pairs(out_a, out_b, pairs)
        diag["embedding_std"] = float(za.std(0).mean())
    return float(loss.detach()), diag


@torch.no_grad()
@contextlib.contextmanager
def _probe_mode(model):
    # Eval mode, except batch norms that never saw data: their default running
    # stats are meaningless, so they normalize with batch statistics instead.
    was_training = model.training
    model.eval()
    fresh = [m for m in model.modules()
             if isinstance(m, nn.modules.batchnorm._BatchNorm) and int(m.num_batches_tracked) == 0]
    saved = [(m.running_mean.clone(), m.running_var.clone()) for m in fresh]
    for m in fresh:
        m.train()
    try:
        yield
    finally:
        for m, (mean, var) in zip(fresh, saved):
            m.running_mean.copy_(mean)
            m.running_var.copy_(var)
            m.num_batches_tracked.zero_()
        model.train(was_training)


def collapse_probe(model: SequenceModel, probe) -> float:
    """Mean cosine similarity of backbone outputs of different images at the same position.

    ``probe`` is a list of equal-width :class:`LineImage` or a (B, 40, W)
    array/tensor. Pairs of identical images are left out. A model whose
    output depends on position only scores 1.
    """
    if isinstance(probe, (list, tuple)):
        widths = {l.width for l in probe}
        if len(widths) != 1:
            raise ValueError("probe lines must share one width")
        x = torch.from_numpy(np.stack([l.pixels for l in probe]))
    else:
        x = torch.as_tensor(probe)
    if x.shape[0] < 2:
        raise ValueError("collapse probe needs at least two lines")
    with torch.no_grad(), _probe_mode(model):
        feats = F.normalize(model.features(x), dim=-1)
    flat = x.reshape(x.shape[0], -1)
    scores = []
    for i in range(x.shape[0]):
        for j in range(i + 1, x.shape[0]):
            if torch.equal(flat[i], flat[j]):
                continue
            scores.append(float((feats[i] * feats[j]).sum(-1).mean()))
    if not scores:
        raise ValueError("collapse probe needs at least two distinct lines")
    return float(np.mean(scores))


def probe_set(corpus: Corpus, n: int = 16, width: int = 128, seed: int = 0) -> list[LineImage]:
    """Equal-width crops from distinct lines for :func:`collapse_probe`."""
    rng = np.random.default_rng(seed)
    wide = [e.image for e in corpus if e.image.width >= width]
    if len(wide) < 2:
        raise ValueError(f"need at least two lines of width >= {width}")
    pick = rng.choice(len(wide), size=min(n, len(wide)), replace=False)
    out = []
    for i in pick:
        l = wide[int(i)]
        x0 = int(rng.integers(0, (l.width - width) // SUBSAMPLE + 1)) * SUBSAMPLE
        out.append(LineImage(l.id, l.pixels[:, x0:x0 + width]))
    return out


def train_joint(model: SequenceModel, corpus: Corpus, schedule: Schedule, config: JointConfig, seed: int = 0,
                augmentation: Optional[AugmentConfig] = None, probe: Optional[list] = None,
                metrics: Optional[MetricsStream] = None, log_every: int = 50) -> dict:
    """Joint-embedding pre-training over ``schedule`` with shifted view pairs."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    aug = augmentation or AugmentConfig.visual()
    opt, sched = make_optimizer(model.parameters(), schedule)
    usable = [e.image for e in corpus if e.image.width >= 2 * SUBSAMPLE]
    if not usable:
        raise ValueError("no line is wide enough for view pairs")
    history = {"loss": [], "collapse": []}
    for step in range(schedule.total_iterations):
        bs = schedule.batch_size_at(step)
        width = config.crop_width_at(step)
        idx = rng.choice(len(usable), size=bs, replace=len(usable) < bs)
        pairs = [make_view_pair(usable[int(i)], width, int(rng.integers(2**31)), aug, shift=config.shift)
                 for i in idx]
        loss, diag = joint_step(model, opt, pairs, config, sched)
        history["loss"].append(loss)
        if step % log_every == 0 or step == schedule.total_iterations - 1:
            record = {"iteration": step, "loss": loss, "lr": schedule.lr_at(step), "crop_width": width, **diag}
            if probe is not None:
                record["collapse"] = collapse_probe(model, probe)
                history["collapse"].append((step, record["collapse"]))
            if metrics is not None:
                metrics.write(**record)
    history["iterations"] = sched.last_epoch
    model.eval()
    return history
