"""CTC text recognition: loss, greedy decoding, CER, training and evaluation.

The blank is always the last class of the logit vector.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, apply_all
from .backbone import (HeadSpec, SequenceModel, batch_tensor, load_checkpoint, replace_head,
                       save_checkpoint)
from .dataset import Charset, Corpus, LineImage
from .schedule import MetricsStream, Schedule, make_optimizer, schedule_from_table

logger = logging.getLogger(__name__)

_NEG = -1e30


class CTCInfeasibleError(ValueError):
    """Target needs more frames than the input provides."""


def ctc_min_frames(target: Sequence[int]) -> int:
    """Shortest input admitting ``target``: one frame per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_batch(logits: torch.Tensor, frame_lengths, targets: Sequence[Sequence[int]],
                   blank: Optional[int] = None) -> torch.Tensor:
    """Per-line CTC negative log-likelihood, shape (B,).

    Forward (alpha) recursion in log space over the blank-extended target
    ``[blank, y1, blank, y2, ..., blank]``. ``logits`` is (B, T, C) and is
    log-softmax normalized here.
    """
    b, t_max, c = logits.shape
    blank = c - 1 if blank is None else blank
    lengths = [int(x) for x in frame_lengths]
    for i, (tgt, n) in enumerate(zip(targets, lengths)):
        need = ctc_min_frames(tgt)
        if need > n:
            raise CTCInfeasibleError(f"line {i}: target of length {len(tgt)} needs {need} frames, has {n}")
        if n > t_max:
            raise ValueError(f"line {i}: frame length {n} exceeds logits length {t_max}")

    s_max = 2 * max((len(t) for t in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    skip = torch.zeros((b, s_max), dtype=torch.bool)
    for i, tgt in enumerate(targets):
        for j, y in enumerate(tgt):
            ext[i, 2 * j + 1] = int(y)
            if j > 0 and tgt[j - 1] != y:
                skip[i, 2 * j + 1] = True

    logp = F.log_softmax(logits, dim=-1)
    emit = logp.gather(2, ext[:, None, :].expand(b, t_max, s_max))
    pad = logp.new_full((b, 2), _NEG)

    alpha = logp.new_full((b, s_max), _NEG)
    init = torch.zeros((b, s_max), dtype=torch.bool)
    init[:, 0] = True
    if s_max > 1:
        init[:, 1] = True
    alpha = torch.where(init, emit[:, 0], alpha)
    lens = torch.tensor(lengths)
    for t in range(1, t_max):
        stay = alpha
        shifted = torch.cat([pad, alpha], dim=1)
        step = shifted[:, 1:1 + s_max]
        jump = torch.where(skip, shifted[:, :s_max], torch.full_like(alpha, _NEG))
        new = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where((t < lens)[:, None], new, alpha)

    out = []
    for i, tgt in enumerate(targets):
        s = 2 * len(tgt) + 1
        ends = alpha[i, s - 1:s] if s == 1 else alpha[i, s - 2:s]
        out.append(-torch.logsumexp(ends, dim=0))
    return torch.stack(out)


def ctc_loss(logits: torch.Tensor, target: Sequence[int], blank: Optional[int] = None) -> torch.Tensor:
    """CTC loss of one (T, C) logit sequence against one target."""
    return ctc_loss_batch(logits[None], [logits.shape[0]], [list(target)], blank)[0]


def best_path(logits, blank: Optional[int] = None) -> list[int]:
    """Collapse repeats then drop blanks on the per-frame argmax path."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    blank = arr.shape[-1] - 1 if blank is None else blank
    path = arr.argmax(axis=-1)
    out, prev = [], None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def greedy_decode(logits, charset: Charset) -> str:
    ids = best_path(logits, charset.blank_index)
    return "".join(charset.symbols[i] for i in ids if i < len(charset.symbols))


def edit_operations(hyp: Sequence, ref: Sequence) -> tuple[int, int, int, int]:
    """Levenshtein distance with unit costs, split into (distance, subs, ins, dels)."""
    n, m = len(hyp), len(ref)
    # each cell holds (cost, subs, ins, dels)
    prev = [(j, 0, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, m + 1):
            if hyp[i - 1] == ref[j - 1]:
                diag = prev[j - 1]
            else:
                d = prev[j - 1]
                diag = (d[0] + 1, d[1] + 1, d[2], d[3])
            u = prev[j]
            ins = (u[0] + 1, u[1], u[2] + 1, u[3])
            l = cur[j - 1]
            dele = (l[0] + 1, l[1], l[2], l[3] + 1)
            cur.append(min(diag, ins, dele, key=lambda c: c[0]))
        prev = cur
    return prev[m]


def cer(hypothesis: str, reference: str) -> float:
    if not reference:
        raise ValueError("CER is undefined for an empty reference")
    return edit_operations(hypothesis, reference)[0] / len(reference)


@dataclass
class EvalReport:
    corpus: str
    cer: float
    distances: dict
    ref_lengths: dict
    substitutions: int
    insertions: int
    deletions: int
    hypotheses: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus, "cer": self.cer, "substitutions": self.substitutions,
            "insertions": self.insertions, "deletions": self.deletions,
            "lines": len(self.distances), "reference_chars": sum(self.ref_lengths.values()),
            "edit_distance": sum(self.distances.values()),
        }

    def table(self) -> str:
        d = self.to_dict()
        return "\n".join([
            f"{'corpus':<16}{d['corpus']}",
            f"{'lines':<16}{d['lines']}",
            f"{'ref chars':<16}{d['reference_chars']}",
            f"{'edits':<16}{d['edit_distance']} (S {d['substitutions']} / I {d['insertions']} / D {d['deletions']})",
            f"{'CER':<16}{100 * d['cer']:.2f} %",
        ])

    def write_predictions(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for line_id, hyp in self.hypotheses.items():
                f.write(f"{line_id}\t{hyp}\n")


@torch.no_grad()
def predict(model: SequenceModel, lines: Sequence[LineImage], batch_size: int = 32) -> list[np.ndarray]:
    model.eval()
    out = []
    for s in range(0, len(lines), batch_size):
        chunk = list(lines[s:s + batch_size])
        x, frames = batch_tensor(chunk)
        logits = model(x, frames)
        out += [logits[i, : frames[i]].numpy() for i in range(len(chunk))]
    return out


def report_from_pairs(name: str, pairs) -> EvalReport:
    """Aggregate (line_id, hypothesis, reference) triples into a report."""
    distances, lengths, hyps = {}, {}, {}
    subs = ins = dels = 0
    for line_id, hyp, ref in pairs:
        d, s, i, de = edit_operations(hyp, ref)
        distances[line_id], lengths[line_id], hyps[line_id] = d, len(ref), hyp
        subs, ins, dels = subs + s, ins + i, dels + de
    total = sum(lengths.values())
    if total == 0:
        raise ValueError("evaluation corpus has no reference characters")
    return EvalReport(name, sum(distances.values()) / total, distances, lengths, subs, ins, dels, hyps)


def evaluate(model: SequenceModel, corpus: Corpus, batch_size: int = 32,
             charset: Optional[Charset] = None) -> EvalReport:
    """Greedy-decode every line and compute corpus CER (total edits / total reference chars).

    ``charset`` is the model's output inventory (default: the corpus's own).
    Reference characters outside it simply count as errors.
    """
    if not corpus.annotated:
        raise ValueError(f"corpus {corpus.name!r} has unannotated lines")
    entries = list(corpus)
    logits = predict(model, [e.image for e in entries], batch_size)
    cs = charset or corpus.charset
    triples = [(e.id, greedy_decode(lg, cs), e.text) for e, lg in zip(entries, logits)]
    return report_from_pairs(corpus.name, triples)


def charset_to_meta(charset: Charset) -> dict:
    return {"charset": "".join(charset.symbols), "charset_size": charset.size}


def charset_from_meta(meta: dict) -> Charset:
    if "charset" not in meta:
        raise ValueError("checkpoint carries no charset; it was not trained for OCR")
    return Charset(tuple(meta["charset"]), meta.get("charset_size"))


def _ocr_batch(corpus: Corpus, idx, rng, aug: Optional[AugmentConfig]):
    lines, targets = [], []
    for i in idx:
        e = corpus[int(i)]
        img = e.image
        if aug is not None:
            img = apply_all(img, None, int(rng.integers(2**31)), aug)
        if ctc_min_frames(e.transcription.indices) > img.frames:
            img = e.image
            if ctc_min_frames(e.transcription.indices) > img.frames:
                continue
        lines.append(img)
        targets.append(list(e.transcription.indices))
    return lines, targets


def _eval_steps(schedule: Schedule, fraction: float) -> set:
    steps = set()
    for s in schedule.stages:
        every = max(1, int(np.ceil((s.end - s.start) * fraction)))
        steps.update(range(s.start + every - 1, s.end, every))
        steps.add(s.end - 1)
    return steps


def train_ocr(model, corpus: Corpus, schedule: Optional[Schedule] = None, augmentation="all",
              val: Optional[Corpus] = None, seed: int = 0, new_head: Optional[bool] = None,
              metrics: Optional[MetricsStream] = None, checkpoint_dir=None, eval_fraction: float = 0.1,
              select_best: bool = True) -> tuple[SequenceModel, dict]:
    """Train with CTC on an annotated corpus.

    ``model`` is a :class:`SequenceModel` or a checkpoint path (read, never
    written). With ``new_head`` (default: whenever the current head does not
    produce ``charset.num_classes`` outputs) the head is replaced by a fresh
    ``Linear(num_classes)`` before training. Validation CER is computed every
    ``eval_fraction`` of each stage; the best-validation weights are restored
    at the end when ``select_best`` is set.
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    if not corpus.annotated:
        raise ValueError(f"corpus {corpus.name!r} has unannotated lines")
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
        if new_head is None:
            new_head = True
    schedule = schedule or schedule_from_table("ocr_scratch", 0.01)
    n_classes = corpus.charset.num_classes
    head = model.config.head
    matches = head.kind == "linear" and head.output_size == n_classes
    if new_head is None:
        new_head = not matches
    if new_head:
        replace_head(model, HeadSpec.linear(n_classes), seed=seed)
    elif not matches:
        raise ValueError(f"model head {head} does not match charset size {n_classes}")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    aug = None if augmentation in (None, "none") else (
        AugmentConfig.named(augmentation) if isinstance(augmentation, str) else augmentation)
    opt, sched = make_optimizer(model.parameters(), schedule)
    eval_at = _eval_steps(schedule, eval_fraction) if val is not None else set()
    history = {"loss": [], "val_cer": []}
    best = (float("inf"), None, -1)
    stage_ends = set(schedule.boundaries)
    charset_meta = charset_to_meta(corpus.charset)

    for step in range(schedule.total_iterations):
        model.train()
        bs = schedule.batch_size_at(step)
        idx = rng.choice(len(corpus), size=bs, replace=len(corpus) < bs)
        lines, targets = _ocr_batch(corpus, idx, rng, aug)
        if not lines:
            sched.step()
            continue
        x, frames = batch_tensor(lines)
        logits = model(x, frames)
        loss = ctc_loss_batch(logits, frames, targets, n_classes - 1).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"CTC loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        history["loss"].append(loss.item())
        record = {"iteration": step, "loss": loss.item(), "lr": schedule.lr_at(step)}
        if step in eval_at:
            rep = evaluate(model, val)
            history["val_cer"].append((step, rep.cer))
            record["val_cer"] = rep.cer
            if rep.cer < best[0]:
                best = (rep.cer, copy.deepcopy(model.state_dict()), step)
                if checkpoint_dir is not None:
                    save_checkpoint(model, Path(checkpoint_dir) / "best.pt", step=step, val_cer=rep.cer, **charset_meta)
        if metrics is not None and (step in eval_at or step % 25 == 0):
            metrics.write(**record)
        if checkpoint_dir is not None and step + 1 in stage_ends:
            save_checkpoint(model, Path(checkpoint_dir) / f"stage_end_{step + 1}.pt", step=step + 1,
                            **charset_meta)

    history["iterations"] = sched.last_epoch
    if select_best and best[1] is not None:
        model.load_state_dict(best[1])
        history["best_step"] = best[2]
        history["best_val_cer"] = best[0]
    model.eval()
    return model, history
