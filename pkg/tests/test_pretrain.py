import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from textssl.augment import AugmentConfig, make_view_pair
from textssl.backbone import HeadSpec
from textssl.dataset import LineImage
from textssl.labelgen import LabelManifest
from textssl.pretrain import (JointConfig, LabelAlignmentError, collapse_probe, joint_loss, mask_slices,
                              masked_logits_loss, masked_step, ntxent_loss, probe_set, topk_error, topk_errors,
                              train_joint, train_masked, vicreg_loss)
from textssl.schedule import Schedule, Stage, make_optimizer

from conftest import tiny_model
from oracles import ntxent_scalar, topk_sorted, vicreg_scalar


def _line(frames, seed=0):
    return LineImage(f"x{seed}", np.random.default_rng(seed).random((40, 8 * frames), dtype=np.float32))


# masking

def test_mask_p_zero_and_one():
    line = _line(20)
    out, spec = mask_slices(line, 0.0, seed=1)
    assert spec.masked_frames == () and np.array_equal(out, line.pixels)
    out, spec = mask_slices(line, 1.0, seed=1)
    assert spec.masked_frames == tuple(range(20))
    assert not np.array_equal(out, line.pixels)


def test_mask_count_within_binomial_bound():
    _, spec = mask_slices(np.ones((40, 8 * 10_000), np.float32), 0.2, seed=0)
    assert abs(len(spec.masked_frames) - 2000) <= 120


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), frames=st.integers(1, 40), p=st.floats(0, 1))
def test_mask_touches_only_masked_slices(seed, frames, p):
    px = np.ones((40, 8 * frames), np.float32)
    out, spec = mask_slices(px, p, seed)
    for f in range(frames):
        sl = out[:, 8 * f:8 * f + 8]
        if f in spec.masked_frames:
            assert sl.min() >= 0 and sl.max() < 1
        else:
            assert np.all(sl == 1)


def test_mask_rejects_bad_input():
    with pytest.raises(ValueError):
        mask_slices(_line(4), 1.5)
    with pytest.raises(ValueError):
        mask_slices(np.ones((40, 12), np.float32))


# masked loss

def test_loss_only_at_masked_frames():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=(2, 10, 6)))
    labels = torch.tensor(rng.integers(0, 6, size=(2, 10)))
    mask = torch.tensor(rng.random((2, 10)) < 0.4)
    base, _, _ = masked_logits_loss(logits, labels, mask)
    zeroed = torch.where(mask[..., None], logits, torch.zeros_like(logits))
    assert masked_logits_loss(zeroed, labels, mask)[0] == base


def test_uniform_logits_give_log_k():
    k = 4096
    logits = torch.zeros(1, 5, k)
    labels = torch.randint(0, k, (1, 5))
    loss, _, _ = masked_logits_loss(logits, labels, torch.ones(1, 5, dtype=torch.bool))
    assert loss.item() == pytest.approx(math.log(4096), abs=1e-4)


@pytest.mark.filterwarnings("ignore:Detected call of")
def test_masked_step_skips_without_masked_frames():
    m = tiny_model(head=HeadSpec.linear(4))
    opt, sched = make_optimizer(m.parameters(), Schedule((Stage(0, 5, 1e-3, 2),)))
    before = [p.clone() for p in m.parameters()]
    line = _line(6)
    res = masked_step(m, opt, [line], [np.zeros(6, int)], 0.0, np.random.default_rng(0), sched)
    assert res.skipped and res.report is None
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))
    assert sched.last_epoch == 1


def test_masked_step_misaligned_labels_name_the_line():
    m = tiny_model(head=HeadSpec.linear(4))
    opt, _ = make_optimizer(m.parameters(), Schedule((Stage(0, 5, 1e-3, 2),)))
    with pytest.raises(LabelAlignmentError, match="x0"):
        masked_step(m, opt, [_line(6)], [np.zeros(5, int)], 0.5, np.random.default_rng(0))


def test_train_masked_on_fixed_labels(printed):
    labels = LabelManifest({e.id: np.arange(e.image.frames) % 4 for e in printed}, 4, "toy")
    m = tiny_model(head=HeadSpec.linear(4))
    hist = train_masked(m, printed, labels, Schedule((Stage(0, 40, 3e-3, 4),), warmup=4), crop_width=128,
                        val=printed)
    assert hist["iterations"] == 40
    assert hist["val"]["top1"] <= hist["val"]["top3"] + 1 and hist["val"]["top3"] >= hist["val"]["top10"]
    with pytest.raises(LabelAlignmentError):
        train_masked(m, printed, LabelManifest({}, 4, "toy"), Schedule((Stage(0, 1, 1e-3, 1),)))


# top-k

def test_topk_examples():
    k = 12
    def at_rank(r):
        row = np.zeros(k)
        row[:r - 1] = 2.0
        row[r - 1] = 1.0
        return row, r - 1
    rows = [at_rank(2)] * 4
    rep = topk_error(np.stack([r for r, _ in rows]), [y for _, y in rows])
    assert (rep.top1, rep.top3, rep.top10) == (1.0, 0.0, 0.0)
    rows = [at_rank(1)] * 3
    rep = topk_error(np.stack([r for r, _ in rows]), [y for _, y in rows])
    assert (rep.top1, rep.top3, rep.top10) == (0.0, 0.0, 0.0)
    rows = [at_rank(1), at_rank(2), at_rank(11)]
    rep = topk_error(np.stack([r for r, _ in rows]), [y for _, y in rows])
    assert rep.top1 == pytest.approx(2 / 3) and rep.top3 == pytest.approx(1 / 3) and rep.top10 == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        topk_error(np.zeros((0, 3)), [])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 30), k=st.integers(1, 15), ties=st.booleans())
def test_topk_matches_sort_oracle(seed, n, k, ties):
    rng = np.random.default_rng(seed)
    logits = rng.integers(0, 3, size=(n, k)).astype(float) if ties else rng.normal(size=(n, k))
    labels = rng.integers(0, k, size=n)
    got = topk_errors(logits, labels, (1, 3, 10))
    for kk in (1, 3, 10):
        assert got[kk] == topk_sorted(logits, labels, kk)
    assert got[1] >= got[3] >= got[10]


# VICReg

def test_vicreg_examples():
    z = torch.tensor([[-2.0, 2.0], [2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
    t = vicreg_loss(z, z.clone())
    assert t.invariance == 0 and t.variance == 0 and t.covariance == 0
    same = torch.ones(5, 3)
    t = vicreg_loss(same, same)
    # hinge of gamma - sqrt(0 + eps)
    assert t.variance.item() == pytest.approx(1 - math.sqrt(1e-4), abs=1e-6)
    z1 = torch.tensor([1.0, 2.0, 4.0, 7.0])
    z = torch.stack([z1, z1], 1)
    v = z1.var().item()
    t = vicreg_loss(z, z)
    assert t.covariance.item() == pytest.approx(2 * (2 * v**2 / 2), rel=1e-6)
    with pytest.raises(ValueError):
        vicreg_loss(torch.ones(1, 3), torch.ones(1, 3))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 6), d=st.integers(1, 5))
def test_vicreg_matches_scalar_oracle(seed, n, d):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(n, d)) * 0.7, rng.normal(size=(n, d)) * 1.3
    t = vicreg_loss(torch.tensor(za), torch.tensor(zb))
    total, inv, var, cov = vicreg_scalar(za, zb)
    assert t.invariance.item() == pytest.approx(inv, rel=1e-9, abs=1e-12)
    assert t.variance.item() == pytest.approx(var, rel=1e-9, abs=1e-12)
    assert t.covariance.item() == pytest.approx(cov, rel=1e-9, abs=1e-12)
    assert t.total.item() == pytest.approx(total, rel=1e-9)


# NT-Xent

def test_ntxent_examples():
    za = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    loss = ntxent_loss(za, za.clone(), ([0, 1], [0, 1]), 0.1)
    assert loss.item() == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), rel=1e-3)
    assert loss.item() == pytest.approx(4.54e-5, rel=1e-2)
    zb = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    assert ntxent_loss(zb, zb.clone(), ([0, 1], [0, 1]), 0.1).item() < 1e-6
    flat = torch.ones(6, 4)
    assert ntxent_loss(flat, flat, ([0, 1, 2], [1, 2, 3]), 0.1).item() == pytest.approx(math.log(6), abs=1e-6)


def test_ntxent_errors():
    z = torch.ones(3, 2)
    with pytest.raises(ValueError):
        ntxent_loss(z, z, ([], []))
    with pytest.raises(ValueError):
        ntxent_loss(torch.zeros(3, 2), z, ([0], [0]))
    with pytest.raises(ValueError):
        ntxent_loss(z, z, ([0], [0]), temperature=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), la=st.integers(2, 6), lb=st.integers(2, 6), d=st.integers(2, 5))
def test_ntxent_matches_scalar_oracle_and_rotation(seed, la, lb, d):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(la, d)), rng.normal(size=(lb, d))
    shift = int(rng.integers(-(la - 1), lb))
    pa = [i for i in range(la) if 0 <= i - shift < lb] or [0]
    pb = [i - shift for i in pa] if pa != [0] or 0 <= -shift < lb else [0]
    got = ntxent_loss(torch.tensor(za), torch.tensor(zb), (pa, pb), 0.1).item()
    assert got == pytest.approx(ntxent_scalar(za, zb, (pa, pb), 0.1), rel=1e-9)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    rot = ntxent_loss(torch.tensor(za @ q), torch.tensor(zb @ q), (pa, pb), 0.1).item()
    assert rot == pytest.approx(got, abs=1e-6)


def _fd_check(fn, *tensors, eps=1e-6):
    tensors = [t.clone().requires_grad_(True) for t in tensors]
    fn(*tensors).backward()
    for t in tensors:
        num = torch.zeros_like(t)
        flat = t.detach().view(-1)
        for i in range(flat.numel()):
            up, down = [x.detach().clone() for x in tensors], [x.detach().clone() for x in tensors]
            k = [x is t for x in tensors].index(True)
            up[k].view(-1)[i] += eps
            down[k].view(-1)[i] -= eps
            num.view(-1)[i] = (fn(*up) - fn(*down)) / (2 * eps)
        assert torch.allclose(t.grad, num, rtol=1e-3, atol=1e-6)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    za, zb = torch.tensor(rng.normal(size=(4, 8))), torch.tensor(rng.normal(size=(4, 8)))
    _fd_check(lambda a, b: vicreg_loss(a, b).total, za, zb)
    _fd_check(lambda a, b: ntxent_loss(a, b, ([1, 2, 3], [0, 1, 2]), 0.1), za, zb)


# joint embedding

def test_vicreg_gathers_pairs_across_batch(printed):
    pairs = [make_view_pair(e.image, 64, seed=i, config=AugmentConfig.none()) for i, e in enumerate(printed)][:3]
    rng = np.random.default_rng(0)
    out_a, out_b = torch.tensor(rng.normal(size=(3, 8, 5))), torch.tensor(rng.normal(size=(3, 8, 5)))
    loss, diag = joint_loss(out_a, out_b, pairs, JointConfig("vicreg"))
    za = np.concatenate([out_a[i, vp.pairs()[0]].numpy() for i, vp in enumerate(pairs)])
    zb = np.concatenate([out_b[i, vp.pairs()[1]].numpy() for i, vp in enumerate(pairs)])
    assert loss.item() == pytest.approx(vicreg_scalar(za, zb)[0], rel=1e-9)
    assert set(diag) == {"invariance", "variance", "covariance"}


def test_joint_config_validation_and_doubling():
    cfg = JointConfig(crop_width=256, crop_doubling_step=10)
    assert cfg.crop_width_at(9) == 256 and cfg.crop_width_at(10) == 512
    for bad in (dict(temperature=0), dict(crop_width=100), dict(criterion="byol")):
        with pytest.raises(ValueError):
            JointConfig(**bad)


def test_train_joint_logs_and_doubles_crop(printed, tmp_path):
    from textssl.schedule import MetricsStream
    m = tiny_model(head=HeadSpec.linear(8))
    cfg = JointConfig("ntxent", crop_width=32, crop_doubling_step=4)
    path = tmp_path / "m.jsonl"
    hist = train_joint(m, printed, Schedule((Stage(0, 6, 1e-3, 2),)), cfg, probe=probe_set(printed, 4, 64),
                       metrics=MetricsStream(path), log_every=1)
    import json
    recs = [json.loads(l) for l in path.read_text().splitlines()]
    assert [r["crop_width"] for r in recs] == [32] * 4 + [64] * 2
    assert all("collapse" in r and "embedding_std" in r for r in recs)
    assert hist["iterations"] == 6


# collapse probe

def test_probe_constant_per_position_scores_one(printed):
    m = tiny_model("vit")
    with torch.no_grad():
        for p in m.embed.parameters():
            p.zero_()
    assert collapse_probe(m, probe_set(printed, 8, 64)) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("backbone", ["vit", "vggt"])
def test_probe_random_init_below_threshold(backbone, printed):
    m = tiny_model(backbone)
    state = {k: v.clone() for k, v in m.state_dict().items()}
    assert collapse_probe(m, probe_set(printed, 12, 128)) < 0.99
    assert all(torch.equal(state[k], v) for k, v in m.state_dict().items())


def test_probe_excludes_identical_pairs(printed):
    m = tiny_model()
    lines = probe_set(printed, 2, 64)
    # the only extra pairs are (b, a) again and the degenerate (a, a)
    assert collapse_probe(m, lines + [lines[0]]) == pytest.approx(collapse_probe(m, lines), abs=1e-6)
    with pytest.raises(ValueError):
        collapse_probe(m, lines[:1])
    with pytest.raises(ValueError):
        collapse_probe(m, [lines[0], lines[0]])
