import numpy as np
import pytest

from mossm import network as N
from mossm import tensor as T
from mossm.aggregation import SpatioTemporalCloud, voxelize
from mossm.errors import CheckpointMismatch, CountMismatch


def _toy_cloud(rng, n=50, F=3, extent=1.0):
    counts = np.full(F, n // F)
    counts[0] += n - counts.sum()
    t = np.repeat(np.arange(F), counts)
    pts = np.column_stack([rng.uniform(0, extent, (n, 3)), t])
    return SpatioTemporalCloud(pts, counts.tolist())


def _seg_info(rng, m=12, F=3):
    g = rng.integers(0, 4, (m, 3))
    t = rng.integers(0, F, m)
    lvl = N.Level(g, t, np.zeros(m, np.int64), F)
    return lvl.seq("hilbert")


# ---------------------------------------------------------------- TCBE

def test_tcbe_identity_temporal_trend(rng):
    emb = N.TCBE(N.TCBEConfig(4), rng)
    k = emb.temporal_trend.weight.data
    k[...] = 0.0
    k[k.shape[0] // 2] = np.eye(4)
    coords, times = rng.standard_normal((9, 3)), rng.uniform(0, 1, (9, 1))
    _, parts = emb(coords, times, return_parts=True)
    f_s, f_t = parts["f_s"].data, parts["f_t"].data
    np.testing.assert_array_equal(parts["f_t_trend"].data, f_t)
    np.testing.assert_array_equal(parts["f_cou2"].data, (f_s + f_t) + f_t * f_s)


def test_tcbe_zero_time_zero_gate(rng):
    emb = N.TCBE(N.TCBEConfig(4), rng)
    _, parts = emb(rng.standard_normal((7, 3)), np.zeros((7, 1)), return_parts=True)
    np.testing.assert_array_equal(parts["f_tgs"].data, 0.0)
    np.testing.assert_array_equal(parts["f_cou2"].data, parts["f_cou"].data)


def test_tcbe_no_cross_segment_mixing(rng):
    emb = N.TCBE(N.TCBEConfig(4), rng).eval()
    coords, times = rng.standard_normal((8, 3)), rng.uniform(0, 1, (8, 1))
    seg = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    out = emb(coords, times, seg).data
    assert out.shape == (8, 4)
    coords2 = coords.copy()
    coords2[5:] += 10.0
    np.testing.assert_array_equal(emb(coords2, times, seg).data[:3], out[:3])


# ---------------------------------------------------------------- RA

def test_ra_single_scan_identity(rng):
    x = rng.standard_normal((2, 5, 3))
    rows, mask = N.reversed_aggregation(x, [5], 1)
    np.testing.assert_array_equal(rows.data, x)
    assert mask.all()


def test_ra_shape_and_mask(rng):
    x = rng.standard_normal((2, 5, 3))
    rows, mask = N.reversed_aggregation(x, [3, 2], 2)
    assert rows.shape == (4, 3, 3)
    assert (~mask).sum() == 2          # one padded slot per batch element
    np.testing.assert_array_equal(rows.data[~mask], 0.0)


def test_ra_round_trip(rng):
    x = rng.standard_normal((3, 9, 2))
    counts = np.array([[4, 3, 2], [1, 1, 7], [9, 0, 0]])
    rows, mask = N.reversed_aggregation(x, counts, 3)
    np.testing.assert_array_equal(N.inverse_reversed_aggregation(rows, counts, 3, 9).data, x)


def test_ra_count_mismatch(rng):
    with pytest.raises(CountMismatch):
        N.reversed_aggregation(rng.standard_normal((1, 5, 2)), [3, 3], 2)


def test_ra_padding_never_leaks(rng):
    x = rng.standard_normal((2, 7, 3))
    counts = np.array([[5, 2], [1, 6]])
    rows, mask = N.reversed_aggregation(x, counts, 2)
    K = rng.standard_normal((3, 3, 4))
    lengths = mask.sum(axis=1)
    y = T.conv1d(rows, K, row_lengths=lengths).data
    noisy = rows.data.copy()
    noisy[~mask] = rng.standard_normal(((~mask).sum(), 3)) * 1e3
    y2 = T.conv1d(noisy, K, row_lengths=lengths).data
    np.testing.assert_array_equal(y[mask], y2[mask])


def test_ra_indices_keep_sequence_order():
    t = np.array([1, 0, 1, 0, 0])
    idx, inv, counts = N.ra_indices(t, np.zeros(5, np.int64))
    assert idx.tolist() == [[1, 3, 4], [0, 2, -1]]
    assert counts.tolist() == [3, 2]
    flat = idx.ravel()
    assert [flat[i] for i in inv] == [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- MSSM algebra

def test_fusion_algebra(rng):
    f_a = T.Tensor(rng.standard_normal((6, 4)))
    zero = T.Tensor(np.zeros((6, 4)))
    np.testing.assert_array_equal(N.cross_product_attention(zero, f_a).data, 0.5 * f_a.data)
    np.testing.assert_array_equal(N.cross_product_attention(f_a, zero).data, f_a.data)


def test_mssm_branches_zeroed(rng):
    info = _seg_info(rng)
    x = T.Tensor(rng.standard_normal((12, 4)))
    m = N.MSSM(N.MSSMConfig(4, 3), rng)
    m.middle.zero_()
    _, parts = m(x, info, return_parts=True)
    np.testing.assert_array_equal(parts["f_MG"].data, 0.5 * parts["f_A"].data)
    m = N.MSSM(N.MSSMConfig(4, 3), rng)
    m.upper.zero_()
    _, parts = m(x, info, return_parts=True)
    np.testing.assert_array_equal(parts["f_A"].data, 0.0)
    np.testing.assert_array_equal(parts["f_MG"].data, parts["f_M"].data)


def test_gate_of_one_passes_ssm(rng):
    lin = N.Linear(6, 3, rng)
    y = T.Tensor(rng.standard_normal((5, 6)))
    np.testing.assert_array_equal(N.gated_output(y, np.ones((5, 6)), lin).data, lin(y).data)


def test_mssm_gradients(rng):
    info = _seg_info(rng, m=8)
    m = N.MSSM(N.MSSMConfig(3, 2), rng)
    x = T.parameter(rng.standard_normal((8, 3)), "x")
    w = rng.standard_normal((8, 3))
    params = [x] + [p for _, p in m.named_parameters()]
    rep = T.finite_diff_check(lambda: T.sum(T.mul(m(x, info), w)), params, tol=1e-3)
    assert rep.passed, rep.per_input


# ---------------------------------------------------------------- blocks, pooling

def test_zero_block_is_identity(rng):
    plan = N.StagePlan.toy(widths=(4, 8))
    blk = N.Block(4, plan, rng).zero_()
    lvl = N.Level(rng.integers(0, 4, (10, 3)), rng.integers(0, 2, 10), np.zeros(10, np.int64), 2)
    x = T.Tensor(rng.standard_normal((10, 4)))
    np.testing.assert_array_equal(blk(x, lvl, "z").data, x.data)


def test_pool_max_and_bijection(rng):
    np.testing.assert_array_equal(T.segment_max(np.array([[1.0], [3.0]]), np.array([0, 0]), 1).data, [[3.0]])
    g = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [4, 4, 4]])
    lvl = N.Level(g, np.zeros(4, np.int64), np.zeros(4, np.int64), 1)
    coarse, parent = lvl.pool(2)
    assert len(coarse) == 4 and sorted(parent.tolist()) == [0, 1, 2, 3]


def test_unpool_restores_cardinality(rng):
    g = rng.integers(0, 6, (20, 3))
    lvl = N.Level(g, rng.integers(0, 2, 20), np.zeros(20, np.int64), 2)
    coarse, parent = lvl.pool(2)
    x = T.Tensor(rng.standard_normal((20, 4)))
    pooled = N.Pool(4, 8, rng)(x, parent, len(coarse))
    assert pooled.shape == (len(coarse), 8)
    assert N.Unpool(8, 4, rng)(pooled, x, parent).shape == (20, 4)


def test_pool_keeps_time_separate():
    lvl = N.Level(np.zeros((2, 3), np.int64), np.array([0, 1]), np.zeros(2, np.int64), 2)
    coarse, parent = lvl.pool(2)
    assert len(coarse) == 2


# ---------------------------------------------------------------- full model

@pytest.fixture(scope="module")
def toy_model():
    return N.MOSNet(N.StagePlan.toy(widths=(8, 16)))


def test_model_shape_and_determinism(toy_model, rng):
    cloud = _toy_cloud(rng)
    with T.no_tape():
        a = N.model_forward(cloud, toy_model, 0.09).data
        b = N.model_forward(cloud, toy_model, 0.09).data
    assert a.shape == (50, 3) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()


def test_model_permutation_invariance(toy_model, rng):
    cloud = _toy_cloud(rng)
    perm = rng.permutation(len(cloud))
    shuffled = SpatioTemporalCloud(cloud.points[perm], cloud.counts_per_scan)
    with T.no_tape():
        a = N.model_forward(cloud, toy_model, 0.09).data
        b = N.model_forward(shuffled, toy_model, 0.09).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_gradient_reaches_first_block(rng):
    model = N.MOSNet(N.StagePlan.toy(widths=(8, 16)))
    cloud = _toy_cloud(rng)
    with T.Tape() as tape:
        loss = T.sum(T.mul(N.model_forward(cloud, model, 0.09), 1.0))
    tape.backward(loss)
    first = model.enc[0][0]
    norm = sum(float((p.grad ** 2).sum()) for _, p in first.named_parameters() if p.grad is not None)
    assert norm > 0
    assert model.embed.spatial.weight.grad is not None


def test_batched_equals_separate(rng):
    model = N.MOSNet(N.StagePlan.toy(widths=(8, 16))).eval()
    c1, c2 = _toy_cloud(rng, 30), _toy_cloud(rng, 24)
    both = SpatioTemporalCloud(np.concatenate([c1.points, c2.points]), [54],
                               batch=np.repeat([0, 1], [30, 24]))
    with T.no_tape():
        joint = N.model_forward(both, model, 0.09).data
        a = N.model_forward(c1, model, 0.09).data
        b = N.model_forward(c2, model, 0.09).data
    np.testing.assert_allclose(joint, np.concatenate([a, b]), atol=1e-10)


def test_parameter_names_unique():
    model = N.MOSNet(N.StagePlan.toy(widths=(8, 16), depths=(2, 1)))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert any(n.startswith("enc.0.1.") for n in names)


def test_checkpoint_round_trip(tmp_path, rng):
    plan = N.StagePlan.toy(widths=(8, 16))
    model = N.MOSNet(plan)
    for _, p in model.named_parameters():
        p.data += rng.standard_normal(p.shape) * 0.01
    N.save_model(tmp_path / "m.npz", model, extra_arrays={"x": np.arange(3)}, meta={"k": 1})
    loaded, header, extra = N.load_model(tmp_path / "m.npz")
    assert header["meta"] == {"k": 1}
    assert extra["x"].tolist() == [0, 1, 2]
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    with pytest.raises(CheckpointMismatch):
        N.load_model(tmp_path / "m.npz", plan=N.StagePlan.toy(widths=(8, 32)))


def test_prepare_input_levels(rng):
    cloud = _toy_cloud(rng, 60, extent=2.0)
    reps, grid = voxelize(cloud, 0.09)
    inp = N.prepare_input(reps, grid, N.StagePlan.toy(widths=(8, 16, 32)))
    assert len(inp.levels) == 3
    assert len(inp.levels[0]) == len(reps)
    assert len(inp.levels[2]) <= len(inp.levels[1]) <= len(inp.levels[0])
    assert inp.times.max() <= 1.0
