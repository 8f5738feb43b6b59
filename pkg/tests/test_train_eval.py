import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lovasz_oracle import lovasz_softmax_brute
from mossm import losses as L
from mossm import metrics as M
from mossm import tensor as T
from mossm import train as TR
from mossm.errors import LengthMismatch, ParseError, RowNotNormalized
from mossm.optim import AdamW, adamw_step


# ---------------------------------------------------------------- losses

def test_ce_examples():
    big = np.array([[100.0, -100.0, -100.0], [-100.0, 100.0, -100.0]])
    assert float(L.cross_entropy(big, [0, 1]).data) < 1e-40
    assert float(L.cross_entropy(np.zeros((4, 3)), [0, 1, 2, 1]).data) == pytest.approx(math.log(3), abs=1e-15)
    assert float(L.cross_entropy(np.zeros((2, 3)), [-1, -1]).data) == 0.0


def test_ce_ignores_and_weights(rng):
    logits = rng.standard_normal((5, 3))
    t = np.array([0, -1, 2, 1, -1])
    full = float(L.cross_entropy(logits[[0, 2, 3]], t[[0, 2, 3]]).data)
    assert float(L.cross_entropy(logits, t).data) == pytest.approx(full, abs=1e-15)
    w = L.class_frequency_weights(t, 3)
    assert float(L.cross_entropy(logits, t, class_weights=np.ones(3)).data) == pytest.approx(full, abs=1e-15)
    assert np.all(w > 0)


def test_lovasz_perfect_and_single():
    assert float(L.lovasz_softmax(np.eye(3), [0, 1, 2]).data) == 0.0
    p = 0.7
    probs = np.array([[p, 0.2, 0.1]])
    assert float(L.lovasz_softmax(probs, [0]).data) == pytest.approx(1 - p, abs=1e-15)


def test_lovasz_row_check():
    with pytest.raises(RowNotNormalized):
        L.lovasz_softmax(np.array([[0.5, 0.6]]), [0])
    # ignored rows are not checked
    L.lovasz_softmax(np.array([[0.5, 0.6], [0.5, 0.5]]), [-1, 0])


def _probs(rng, n, k=3):
    p = rng.uniform(0.01, 1.0, (n, k))
    return p / p.sum(axis=1, keepdims=True)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_lovasz_brute_force(rng, n):
    for targets in itertools.product(range(3), repeat=n):
        probs = _probs(rng, n)
        got = float(L.lovasz_softmax(probs, list(targets)).data)
        assert got == pytest.approx(lovasz_softmax_brute(probs, targets), abs=1e-9)


@given(st.integers(0, 10_000))
def test_lovasz_range_and_monotone(seed):
    r = np.random.default_rng(seed)
    probs = _probs(r, 3)
    targets = r.integers(0, 3, 3)
    for c in range(3):
        val = float(L.lovasz_softmax(probs, targets, classes=[c]).data)
        assert -1e-12 <= val <= 1 + 1e-12
    wrong = [i for i in range(3) if probs[i].argmax() != targets[i]]
    if not wrong:
        return
    i = wrong[0]
    before = float(L.lovasz_softmax(probs, targets).data)
    moved = probs.copy()
    delta = 0.5 * (1 - moved[i, targets[i]])
    others = [c for c in range(3) if c != targets[i]]
    moved[i, targets[i]] += delta
    share = moved[i, others] / moved[i, others].sum()
    moved[i, others] -= delta * share
    assert float(L.lovasz_softmax(moved, targets).data) <= before + 1e-12


def test_joint_loss(rng):
    logits = rng.standard_normal((6, 3))
    t = rng.integers(0, 3, 6)
    total, ce, ls = L.joint_loss(logits, t)
    assert float(total.data) == float(L.cross_entropy(logits, t).data) + float(L.lovasz_softmax(T.softmax(logits), t).data)
    big = np.where(np.eye(3)[t] > 0, 60.0, -60.0)
    assert float(L.joint_loss(big, t)[0].data) < 1e-20


def test_joint_loss_gradient(rng):
    x = T.parameter(rng.standard_normal((7, 3)))
    t = np.array([0, 1, 2, 1, -1, 0, 2])
    rep = T.finite_diff_check(lambda: L.joint_loss(x, t)[0], [x], tol=1e-4)
    assert rep.passed, rep.per_input


# ---------------------------------------------------------------- optimizer

def test_adam_zero_grads_no_decay():
    p = T.parameter(np.array([1.0, -2.0]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step():
    p = T.parameter(np.array(3.0))
    opt = AdamW([("p", p)], lr=0.01, weight_decay=0.0)
    p.grad = np.array(1.0)
    opt.step()
    assert float(p.data) - 3.0 == pytest.approx(-0.01, rel=1e-7)


def test_decoupled_decay_only():
    p = T.parameter(np.array([2.0, -4.0]))
    q = T.parameter(np.array([2.0]), no_decay=True)
    opt = AdamW([("p", p), ("q", q)], lr=0.1, weight_decay=0.5)
    p.grad, q.grad = np.zeros(2), np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)
    assert q.data[0] == 2.0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(1e-4, 1e-1))
def test_adam_reference_recurrence(grads, lr):
    p, m, v = np.array([0.5]), np.zeros(1), np.zeros(1)
    ref_p, ref_m, ref_v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        adamw_step(p, np.array([g]), m, v, t, lr)
        ref_m = 0.9 * ref_m + 0.1 * g
        ref_v = 0.999 * ref_v + 0.001 * g * g
        ref_p -= lr * (ref_m / (1 - 0.9 ** t)) / (math.sqrt(ref_v / (1 - 0.999 ** t)) + 1e-8)
        assert abs(p[0] - ref_p) < 1e-12


# ---------------------------------------------------------------- metrics

def test_iou_examples():
    gt = np.array([1, 2, 2, 1])
    assert M.iou_mos(gt, gt) == 1.0
    c = M.ConfusionCounts(50, 25, 25)
    assert c.iou == 0.5
    assert math.isnan(M.iou_mos(np.ones(3), np.ones(3)))
    with pytest.raises(LengthMismatch):
        M.iou_mos([1, 2], [1])


def test_iou_skips_unlabeled():
    assert M.iou_mos([2, 2], [2, 0]) == 1.0


@given(st.integers(0, 10_000))
def test_iou_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(1, 3, 30), r.integers(0, 3, 30)
    perm = r.permutation(30)
    a, b = M.iou_mos(pred, gt), M.iou_mos(pred[perm], gt[perm])
    assert (math.isnan(a) and math.isnan(b)) or a == b


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=6))
def test_confusion_associative_commutative(triples):
    cs = [M.ConfusionCounts(*t) for t in triples]
    total = cs[0]
    for c in cs[1:]:
        total = total + c
    rev = cs[-1]
    for c in reversed(cs[:-1]):
        rev = c + rev
    assert (total.tp, total.fp, total.fn) == (rev.tp, rev.fp, rev.fn)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        M.ConfusionCounts(-1, 0, 0)


def test_distance_bins():
    coords = np.array([[10.0, 0, 0], [20.0, 0, 0], [0, 49.999, 0], [0, 0, 50.0], [30, 40, 0.0]])
    pred = np.array([2, 2, 1, 2, 2])
    gt = np.array([2, 2, 2, 1, 2])
    rep = M.distance_binned_eval(pred, gt, coords)
    assert (rep.bins["close"].tp, rep.bins["close"].fp, rep.bins["close"].fn) == (1, 0, 0)
    assert (rep.bins["medium"].tp, rep.bins["medium"].fn) == (1, 1)
    assert (rep.bins["far"].tp, rep.bins["far"].fp) == (1, 1)
    overall = M.confusion(pred, gt)
    assert (rep.overall.tp, rep.overall.fp, rep.overall.fn) == (overall.tp, overall.fp, overall.fn)
    only_close = M.distance_binned_eval(pred[:1], gt[:1], coords[:1])
    assert only_close.bins["medium"].tp + only_close.bins["far"].tp == 0
    assert "close" in rep.to_csv()


# ---------------------------------------------------------------- config

def test_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# desk run\nlr = 0.001\nepochs=3\nwidths=8,16\naugment=false\npatterns=z,hilbert\n")
    cfg = TR.load_config(p, {"F": "2"})
    assert (cfg.lr, cfg.epochs, cfg.widths, cfg.augment, cfg.F) == (0.001, 3, (8, 16), False, 2)
    assert cfg.patterns == ("z", "hilbert")
    round_trip = tmp_path / "d.cfg"
    round_trip.write_text(cfg.to_text())
    assert TR.load_config(round_trip) == cfg


def test_config_defaults_and_errors(tmp_path):
    cfg = TR.TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.F, cfg.grid_size, cfg.batch) == (0.00032, 0.005, 8, 0.09, 4)
    p = tmp_path / "c.cfg"
    p.write_text("nonsense=1\n")
    with pytest.raises(ParseError):
        TR.load_config(p)
    p.write_text("lr\n")
    with pytest.raises(ParseError):
        TR.load_config(p)
    with pytest.raises(ValueError):
        TR.TrainConfig(grid_size=0)


# ---------------------------------------------------------------- training loop

def _tiny_cfg(**kw):
    base = dict(F=2, epochs=5, batch=1, lr=0.003, grid_size=0.2, widths=(8, 16), state_size=4,
                train_scenes=2, val_scenes=1)
    base.update(kw)
    return TR.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return TR.synthetic_split(_tiny_cfg())


def test_training_progress(tiny_data, tmp_path):
    cfg = _tiny_cfg()
    res = TR.train_loop(*tiny_data, cfg, out_dir=tmp_path)
    train_rows = [r for r in res.trace if r["split"] == "train"]
    losses = [r["loss_ce"] + r["loss_ls"] for r in train_rows]
    assert all(math.isfinite(x) for x in losses)
    assert losses[4] < losses[0]
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss_ce,loss_ls,iou_mos,iou_close,iou_medium,iou_far"
    assert (tmp_path / "best.npz").exists() and (tmp_path / "last.npz").exists()


def test_resume_is_bit_exact(tiny_data, tmp_path):
    cfg = _tiny_cfg(epochs=3)
    full = TR.train_loop(*tiny_data, cfg, out_dir=tmp_path / "a")
    TR.train_loop(*tiny_data, cfg, out_dir=tmp_path / "b", stop_after=0)
    resumed = TR.train_loop(*tiny_data, cfg, out_dir=tmp_path / "b", resume=tmp_path / "b" / "last.npz")
    assert (tmp_path / "a" / "trace.csv").read_text() == (tmp_path / "b" / "trace.csv").read_text()
    for (n1, p1), (n2, p2) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert p1.data.tobytes() == p2.data.tobytes(), n1


def test_predict_and_evaluate(tiny_data):
    cfg = _tiny_cfg(epochs=1)
    res = TR.train_loop(*tiny_data, cfg)
    s = tiny_data[1][0]
    pred = TR.predict(res.model, s.cloud, cfg.grid_size)
    assert pred.shape == s.labels.shape and set(np.unique(pred)) <= {1, 2}
    report, ce, ls, ious = TR.evaluate(res.model, tiny_data[1], cfg)
    assert math.isfinite(ce) and math.isfinite(ls) and len(ious) == 1


def test_ablation_csv(tiny_data, tmp_path):
    cfg = _tiny_cfg(epochs=1)
    rows = TR.run_ablation(cfg, tmp_path / "ab.csv", data=tiny_data)
    text = (tmp_path / "ab.csv").read_text().splitlines()
    assert text[0].startswith("setting,patterns,")
    assert [r["setting"] for r in rows] == ["1-pattern", "4-pattern"]
    assert len(text) == 3
