import json

import pytest
import torch
from hypothesis import given, strategies as st

from textssl.schedule import TABLE, MetricsStream, Schedule, Stage, make_optimizer, schedule_from_table


def _rows(s):
    return [(st.start, st.end, st.lr, st.batch_size) for st in s.stages]


def test_masked_full_scale():
    s = schedule_from_table("masked", 1.0)
    assert _rows(s) == [(0, 300_000, 2e-4, 32), (300_000, 500_000, 1e-4, 48), (500_000, 700_000, 5e-5, 48)]
    assert s.warmup == 10_000 and s.total_iterations == 700_000


def test_finetune_full_scale():
    s = schedule_from_table("ocr_finetune", 1.0)
    assert [(a, b, lr) for a, b, lr, _ in _rows(s)] == [(0, 10_000, 2e-4), (10_000, 40_000, 1e-4),
                                                        (40_000, 50_000, 5e-5)]
    assert schedule_from_table("ocr_scratch").total_iterations == 300_000


@pytest.mark.parametrize("phase", sorted(TABLE))
def test_desk_scale_rounds_boundaries(phase):
    full = schedule_from_table(phase, 1.0)
    small = schedule_from_table(phase, 0.01)
    assert small.boundaries == [max(1, -(-b // 100)) for b in full.boundaries]
    assert [s.lr for s in small.stages] == [s.lr for s in full.stages]
    assert [s.batch_size for s in small.stages] == [s.batch_size for s in full.stages]


@given(phase=st.sampled_from(sorted(TABLE)), scale=st.floats(1e-6, 2.0), cap=st.integers(1, 300))
def test_scaled_schedules_stay_valid(phase, scale, cap):
    s = schedule_from_table(phase, scale, max_batch=cap)
    assert s.stages[0].start == 0
    assert all(a.end == b.start and a.end > a.start for a, b in zip(s.stages, s.stages[1:]))
    assert all(1 <= x.batch_size <= cap for x in s.stages)


def test_unknown_phase_and_bad_stages():
    with pytest.raises(ValueError):
        schedule_from_table("byol")
    with pytest.raises(ValueError):
        Schedule((Stage(0, 5, 1e-3, 2), Stage(6, 8, 1e-3, 2)))
    with pytest.raises(ValueError):
        Schedule((Stage(0, 5, -1e-3, 2),))
    with pytest.raises(ValueError):
        Schedule((Stage(1, 5, 1e-3, 2),))


def test_warmup_then_stage_constant_lr():
    s = Schedule((Stage(0, 10, 1e-3, 2), Stage(10, 20, 5e-4, 2)), warmup=4)
    opt, sched = make_optimizer([torch.nn.Parameter(torch.zeros(1))], s)
    seen = []
    for _ in range(20):
        seen.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert seen[:4] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3])
    assert seen[4:10] == pytest.approx([1e-3] * 6) and seen[10:] == pytest.approx([5e-4] * 10)


def test_schedule_dict_round_trip():
    s = schedule_from_table("vicreg", 0.01)
    assert Schedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    assert s.crop_doubling_step == 1000


def test_metrics_stream(tmp_path):
    m = MetricsStream(tmp_path / "a" / "m.jsonl")
    m.write(iteration=0, loss=1.5)
    m.write(iteration=1, loss=1.25)
    lines = (tmp_path / "a" / "m.jsonl").read_text().splitlines()
    assert [json.loads(l)["loss"] for l in lines] == [1.5, 1.25]
