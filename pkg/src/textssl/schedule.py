"""Training schedules (piecewise-constant learning rate with linear warm-up),
the Adam optimizer wiring, and the JSON-lines metrics stream."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch


@dataclass(frozen=True)
class Stage:
    start: int
    end: int
    lr: float
    batch_size: int


@dataclass(frozen=True)
class Schedule:
    stages: tuple[Stage, ...]
    warmup: int = 0
    head: Optional[str] = None
    augmentation: str = "none"
    crop_doubling_step: Optional[int] = None

    def __post_init__(self):
        stages = tuple(Stage(**s) if isinstance(s, dict) else s for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("schedule needs at least one stage")
        if stages[0].start != 0:
            raise ValueError("first stage must start at iteration 0")
        for a, b in zip(stages, stages[1:]):
            if a.end != b.start:
                raise ValueError(f"stages not contiguous: {a.end} != {b.start}")
        for s in stages:
            if s.end <= s.start:
                raise ValueError(f"empty stage {s}")
            if s.lr <= 0:
                raise ValueError("learning rates must be positive")
            if s.batch_size < 1:
                raise ValueError("batch sizes must be positive")

    @property
    def total_iterations(self) -> int:
        return self.stages[-1].end

    @property
    def boundaries(self) -> list[int]:
        return [s.end for s in self.stages]

    def stage_at(self, step: int) -> Stage:
        for s in self.stages:
            if step < s.end:
                return s
        return self.stages[-1]

    def lr_at(self, step: int) -> float:
        lr = self.stage_at(step).lr
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        return lr

    def batch_size_at(self, step: int) -> int:
        return self.stage_at(step).batch_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        d = dict(d)
        d["stages"] = tuple(Stage(**s) for s in d["stages"])
        return cls(**d)


# iterations are absolute stage ends; (end, lr, batch)
TABLE = {
    "masked": dict(warmup=10_000, head="Linear", aug="none",
                   rows=[(300_000, 2e-4, 32), (500_000, 1e-4, 48), (700_000, 5e-5, 48)]),
    "ae": dict(warmup=10_000, head=None, aug="visual",
               rows=[(100_000, 2e-4, 64), (250_000, 1e-4, 128), (300_000, 5e-5, 128)]),
    "vicreg": dict(warmup=25_000, head="MLP(3, 2048)", aug="visual", crop_doubling=100_000,
                   rows=[(120_000, 1e-4, 256)]),
    "ntxent": dict(warmup=25_000, head="Linear(2048)", aug="visual", crop_doubling=100_000,
                   rows=[(30_000, 1e-4, 256), (100_000, 5e-5, 256), (120_000, 5e-5, 256)]),
    "ocr_scratch": dict(warmup=10_000, head="Linear(512)", aug="all",
                        rows=[(150_000, 2e-4, 32), (250_000, 1e-4, 48), (300_000, 5e-5, 64)]),
    "ocr_finetune": dict(warmup=10_000, head="Linear(512)", aug="all",
                         rows=[(10_000, 2e-4, 32), (40_000, 1e-4, 48), (50_000, 5e-5, 64)]),
}


def _scale_step(x: int, scale: float) -> int:
    return max(1, math.ceil(x * scale - 1e-9))


def schedule_from_table(phase: str, scale: float = 1.0, batch_scale: float = 1.0,
                        max_batch: Optional[int] = None) -> Schedule:
    """Schedule for one training phase, iteration counts multiplied by ``scale``.

    Boundaries are rounded up (minimum 1). Learning rates are kept; batch
    sizes are multiplied by ``batch_scale`` (keeping their ratios) and then
    capped at ``max_batch``.
    """
    if phase not in TABLE:
        raise ValueError(f"unknown phase {phase!r}; expected one of {sorted(TABLE)}")
    row = TABLE[phase]
    stages, start = [], 0
    for end, lr, bs in row["rows"]:
        e = max(_scale_step(end, scale), start + 1)
        b = max(1, round(bs * batch_scale))
        if max_batch is not None:
            b = min(b, max_batch)
        stages.append(Stage(start, e, lr, b))
        start = e
    warmup = _scale_step(row["warmup"], scale) if row["warmup"] else 0
    doubling = row.get("crop_doubling")
    return Schedule(tuple(stages), warmup, row["head"], row["aug"],
                    None if doubling is None else _scale_step(doubling, scale))


def make_optimizer(params, schedule: Schedule):
    """Adam whose learning rate follows ``schedule.lr_at`` step by step."""
    opt = torch.optim.Adam(params, lr=1.0)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, schedule.lr_at)
    return opt, sched


class MetricsStream:
    """Newline-delimited JSON records; a no-op sink when ``path`` is None."""

    def __init__(self, path=None, echo=None):
        self.path = None if path is None else Path(path)
        self.records = []
        self.echo = echo
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        record = {k: (float(v) if hasattr(v, "item") else v) for k, v in record.items()}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if self.echo is not None:
            self.echo(record)
