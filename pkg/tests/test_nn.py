import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phaseflow.nn import (
    AdamState,
    BlockParams,
    CheckpointError,
    GmuParams,
    LdamConfig,
    StageParams,
    Tensor,
    adam_step,
    check_gradients,
    conv1d_dilated,
    gmu_forward,
    ldam_loss,
    load_checkpoint,
    mstcn_forward,
    no_grad,
    receptive_field,
    residual_block_forward,
    save_checkpoint,
    stage_forward,
)
from phaseflow.nn.tensor import add, concat, matmul, softmax, sum_all


def naive_conv(x, w, b, dilation, padding):
    c_out, c_in, k = w.shape
    T = x.shape[1]
    out = np.zeros((c_out, T))
    left = (k - 1) * dilation // 2 if padding == "acausal_same" else (k - 1) * dilation
    for o in range(c_out):
        for t in range(T):
            acc = b[o]
            for i in range(c_in):
                for j in range(k):
                    src = t + j * dilation - left
                    if 0 <= src < T:
                        acc += w[o, i, j] * x[i, src]
            out[o, t] = acc
    return out


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def test_identity_kernel(rng):
    x = Tensor(rng.standard_normal((3, 10)))
    w = Tensor(np.eye(3)[:, :, None])
    y = conv1d_dilated(x, w, Tensor(np.zeros(3)), 1, "acausal_same")
    np.testing.assert_array_equal(y.data, x.data)


@pytest.mark.parametrize("padding", ["acausal_same", "causal"])
def test_conv_matches_loop(rng, padding):
    x, w, b = rng.standard_normal((2, 8)), rng.standard_normal((2, 2, 3)), rng.standard_normal(2)
    y = conv1d_dilated(Tensor(x), Tensor(w), Tensor(b), 2, padding)
    np.testing.assert_allclose(y.data, naive_conv(x, w, b, 2, padding), atol=1e-12)


def test_conv_locality(rng):
    x = rng.standard_normal((2, 20))
    w, b = Tensor(rng.standard_normal((2, 2, 3))), Tensor(rng.standard_normal(2))
    base = conv1d_dilated(Tensor(x), w, b, 2, "acausal_same").data
    x2 = x.copy()
    x2[:, 15] += 5.0  # output 5 sees inputs 3, 5, 7 only
    out = conv1d_dilated(Tensor(x2), w, b, 2, "acausal_same").data
    assert np.array_equal(out[:, 5], base[:, 5])
    assert not np.array_equal(out[:, 15], base[:, 15])


def test_conv_shape_errors(rng):
    with pytest.raises(ValueError):
        conv1d_dilated(Tensor(np.zeros((3, 5))), Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros(2)), 1)
    with pytest.raises(ValueError):
        conv1d_dilated(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros(2)), 1)


# ---------------------------------------------------------------------------
# GMU
# ---------------------------------------------------------------------------


def test_gmu_zero_input(rng):
    p = GmuParams.init(rng, [4, 3], 5, np.float64)
    out = gmu_forward([Tensor(np.zeros((4, 6))), Tensor(np.zeros((3, 6)))], p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_gmu_saturated_gate(rng):
    wh = rng.standard_normal((5, 4))
    x = np.abs(rng.standard_normal((4, 3))) + 0.1
    wz = np.full((5, 4), 100.0)  # positive inputs -> gate pre-activation >= 40
    out = gmu_forward([Tensor(x)], GmuParams([Tensor(wh)], [Tensor(wz)]))
    np.testing.assert_allclose(out.data, np.tanh(wh @ x), atol=1e-6)


def test_gmu_scalar_oracle(rng):
    dims = [4, 4, 4]
    p = GmuParams.init(rng, dims, 4, np.float64)
    xs = [rng.standard_normal((4, 2)) for _ in dims]
    out = gmu_forward([Tensor(x) for x in xs], p).data
    for t in range(2):
        joint = np.concatenate([x[:, t] for x in xs])
        for i in range(4):
            total = 0.0
            for k in range(3):
                h = math.tanh(sum(p.w_h[k].data[i, j] * xs[k][j, t] for j in range(4)))
                a = sum(p.w_z[k].data[i, j] * joint[j] for j in range(12))
                total += h / (1.0 + math.exp(-a))
            assert out[i, t] == pytest.approx(total, abs=1e-12)


def test_gmu_modality_mismatch(rng):
    p = GmuParams.init(rng, [2, 2], 3)
    with pytest.raises(ValueError):
        gmu_forward([Tensor(np.zeros((2, 1)))], p)


# ---------------------------------------------------------------------------
# residual blocks, stages
# ---------------------------------------------------------------------------


def zero_block(c, k=3):
    z = lambda *s: Tensor(np.zeros(s))
    return BlockParams(z(c, c, k), z(c), z(c, c, 1), z(c))


def test_residual_identity(rng):
    x = Tensor(rng.standard_normal((4, 9)))
    np.testing.assert_array_equal(residual_block_forward(x, zero_block(4), 2).data, x.data)


def test_residual_composition(rng):
    blk = BlockParams.init(rng, 3, 3, np.float64)
    x = rng.standard_normal((3, 11))
    pre = naive_conv(x, blk.w1.data, blk.b1.data, 4, "acausal_same")
    expect = x + naive_conv(np.maximum(pre, 0), blk.w2.data, blk.b2.data, 1, "acausal_same")
    np.testing.assert_allclose(residual_block_forward(Tensor(x), blk, 4).data, expect, atol=1e-12)


def test_residual_dead_relu(rng):
    blk = BlockParams.init(rng, 3, 3, np.float64)
    blk.w1 = Tensor(np.zeros((3, 3, 3)))
    blk.b1 = Tensor(-np.ones(3))
    x = rng.standard_normal((3, 7))
    np.testing.assert_allclose(residual_block_forward(Tensor(x), blk, 1).data, x + blk.b2.data[:, None])


def test_residual_channel_mismatch(rng):
    with pytest.raises(ValueError):
        residual_block_forward(Tensor(np.zeros((2, 5))), zero_block(3), 1)


def probe_receptive_field(n_layers, T=600):
    rng = np.random.default_rng(0)
    st_ = StageParams.init(rng, 2, 4, 3, n_layers, 3, dtype=np.float64)
    # positive weights and inputs keep every ReLU active, so no path is masked
    for p in st_.named_parameters("").values():
        p.data = np.abs(p.data) + 0.01
    x = rng.random((2, T)) + 0.1
    base = stage_forward(Tensor(x), st_).data
    t = T // 2
    seen = []
    for s in range(T):
        x2 = x.copy()
        x2[:, s] += 1.0
        if not np.array_equal(stage_forward(Tensor(x2), st_).data[:, t], base[:, t]):
            seen.append(s)
    return max(seen) - min(seen) + 1


@pytest.mark.parametrize("layers,field", [(7, 255), (4, 31)])
def test_receptive_field_probe(layers, field):
    assert receptive_field(layers, 3) == field == 1 + 2 * (2**layers - 1)
    assert probe_receptive_field(layers) == field


def test_stage_single_frame(rng):
    st_ = StageParams.init(rng, 5, 4, 9, 3)
    assert stage_forward(Tensor(rng.standard_normal((5, 1)).astype(np.float32)), st_).shape == (9, 1)


def test_mstcn_single_stage_matches(rng):
    st_ = StageParams.init(rng, 5, 4, 9, 3, dtype=np.float64)
    x = Tensor(rng.standard_normal((5, 12)))
    (only,) = mstcn_forward(x, [st_])
    np.testing.assert_array_equal(only.data, stage_forward(x, st_).data)


def test_mstcn_constant_second_stage(rng):
    s1 = StageParams.init(rng, 5, 4, 9, 3, dtype=np.float64)
    s2 = StageParams.init(rng, 9, 4, 9, 2, dtype=np.float64)
    for name, p in s2.named_parameters("").items():
        if name != "b_out":
            p.data[...] = 0.0
    out = mstcn_forward(Tensor(rng.standard_normal((5, 15))), [s1, s2])
    assert len(out) == 2
    np.testing.assert_allclose(out[1].data, np.repeat(s2.b_out.data[:, None], 15, axis=1))


@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_softmax_rows(n, T, seed):
    z = np.random.default_rng(seed).normal(0, 10, size=(n, T))
    p = softmax(Tensor(z), axis=0).data
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    assert (p > 0).all()


def test_forward_deterministic(rng):
    st_ = StageParams.init(rng, 5, 4, 9, 3)
    x = Tensor(rng.standard_normal((5, 30)).astype(np.float32))
    assert stage_forward(x, st_).data.tobytes() == stage_forward(x, st_).data.tobytes()


# ---------------------------------------------------------------------------
# LDAM
# ---------------------------------------------------------------------------


def cross_entropy(z, y):
    z = z - z.max(axis=0)
    logp = z - np.log(np.exp(z).sum(axis=0))
    return -logp[y, np.arange(len(y))].mean()


def test_ldam_reduces_to_cross_entropy(rng):
    z = rng.standard_normal((9, 50))
    y = rng.integers(0, 9, 50)
    loss = ldam_loss(Tensor(z), y, LdamConfig(np.ones(9), 0.0, 1.0))
    assert abs(float(loss.data) - cross_entropy(z, y)) < 1e-9


def test_ldam_uniform_is_ln9():
    loss = ldam_loss(Tensor(np.zeros((9, 20))), np.arange(20) % 9, LdamConfig(np.ones(9), 0.0, 1.0))
    assert abs(float(loss.data) - math.log(9)) < 1e-9


def test_ldam_margin_formula(rng):
    cfg = LdamConfig(np.array([1, 16, 81]), 0.5, 30.0)
    np.testing.assert_allclose(cfg.margins, [0.5, 0.25, 0.5 / 3])
    z = rng.standard_normal((3, 6))
    y = np.array([0, 1, 2, 2, 1, 0])
    total = 0.0
    for t in range(6):
        terms = [cfg.s * (z[j, t] - (cfg.margins[j] if j == y[t] else 0.0)) for j in range(3)]
        total += -terms[y[t]] + math.log(sum(math.exp(v) for v in terms))
    assert float(ldam_loss(Tensor(z), y, cfg).data) == pytest.approx(total / 6, rel=1e-12)


def test_ldam_from_counts_max_margin():
    cfg = LdamConfig.from_counts([10, 1000, 5], max_margin=0.5)
    assert cfg.margins.max() == pytest.approx(0.5)
    assert np.argmax(cfg.margins) == 2


@given(st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_ldam_shift_invariant(c, seed):
    r = np.random.default_rng(seed)
    z = r.standard_normal((4, 8))
    y = r.integers(0, 4, 8)
    cfg = LdamConfig(r.integers(1, 100, 4), 0.3, 5.0)
    a = float(ldam_loss(Tensor(z), y, cfg).data)
    b = float(ldam_loss(Tensor(z + c), y, cfg).data)
    assert abs(a - b) < 1e-9


def test_ldam_label_out_of_range():
    with pytest.raises(ValueError):
        ldam_loss(Tensor(np.zeros((3, 2))), np.array([0, 3]), LdamConfig(np.ones(3), 0.0, 1.0))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_without_forward():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_constant_loss_zero_gradient(rng):
    w = param(rng, 3, 3)
    loss = sum_all(Tensor(np.ones((2, 2))))
    loss.backward()
    assert w.grad is None or not np.any(w.grad)


def test_gradient_linearity(rng):
    w = param(rng, 3, 4)
    x = Tensor(rng.standard_normal((4, 5)))
    f = lambda: sum_all(matmul(w, x))
    g = lambda: sum_all(softmax(matmul(w, x), axis=0))
    f().backward()
    gf = w.grad.copy()
    w.grad = None
    g().backward()
    gg = w.grad.copy()
    w.grad = None
    add(f(), g()).backward()
    np.testing.assert_allclose(w.grad, gf + gg, atol=1e-12)


def test_no_grad_records_nothing(rng):
    w = param(rng, 2, 2)
    with no_grad():
        y = matmul(w, Tensor(np.ones((2, 1))))
    with pytest.raises(RuntimeError):
        y.backward()


def test_gradcheck_layers(rng):
    # every layer type, double precision, step 1e-4
    x = [Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((2, 5)))]
    gmu = GmuParams.init(rng, [3, 2], 4, np.float64)
    blk = BlockParams.init(rng, 4, 3, np.float64)
    y = rng.integers(0, 4, 5)
    ldam = LdamConfig(np.array([3, 5, 9, 2]), 0.4, 2.0)

    def loss():
        h = gmu_forward(x, gmu)
        return ldam_loss(residual_block_forward(h, blk, 2), y, ldam)

    params = {**gmu.named_parameters("gmu."), **blk.named_parameters("blk.")}
    report = check_gradients(loss, params)
    assert max(report.values()) < 1e-4, report


def test_gradcheck_concat_and_softmax(rng):
    a, b = param(rng, 2, 3), param(rng, 1, 3)
    w = param(rng, 3, 3)
    report = check_gradients(lambda: sum_all(matmul(w, softmax(concat([a, b], 0), 0))), {"a": a, "b": b, "w": w})
    assert max(report.values()) < 1e-4


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_no_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["w"].grad = np.zeros(2)
    adam_step(p, AdamState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step():
    p = {"w": Tensor(np.array([0.0]), requires_grad=True)}
    p["w"].grad = np.array([1.0])
    st_ = AdamState()
    adam_step(p, st_)
    assert p["w"].data[0] == pytest.approx(-st_.lr / (1.0 + st_.eps), rel=1e-12)
    assert st_.step == 1


def test_adam_defaults():
    st_ = AdamState()
    assert (st_.lr, st_.weight_decay, st_.beta1, st_.beta2, st_.eps) == (9e-6, 1e-6, 0.9, 0.999, 1e-8)


def test_adam_matches_reference(rng):
    theta = rng.standard_normal(4)
    p = {"w": Tensor(theta.copy(), requires_grad=True)}
    st_ = AdamState(lr=0.01, weight_decay=0.1)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p["w"].grad = g
        adam_step(p, st_)
        g = g + 0.1 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, theta, rtol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"a.w": rng.standard_normal((3, 2, 1)).astype(np.float32), "b": np.float32(rng.standard_normal(5))}
    save_checkpoint(tmp_path / "m.ckpt", arrays)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.array([1.5], dtype=np.float32)})
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"CKPT"
    assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"x"
    assert raw[15] == 1 and raw[16:20] == (1).to_bytes(4, "little")
    assert np.frombuffer(raw[20:], "<f4")[0] == 1.5


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(CheckpointError, match="unrecognized format"):
        load_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.zeros(10, np.float32)})
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
