"""Autodiff core: primitives vs central differences, fused ops, Adam, checkpoints."""

import math

import numpy as np
import pytest

from httransformer import diffcore as dc


def t(data, grad=True):
    return dc.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def rand(rng, *shape, away_from=None, margin=0.5):
    x = rng.standard_normal(shape)
    if away_from is not None:
        x = np.where(np.abs(x - away_from) < margin, x + np.sign(x - away_from + 1e-12) * margin, x)
    return x


# -- primitive grad checks on random shapes/seeds -----------------------------------


PRIMITIVE_CASES = []


def case(name):
    def wrap(fn):
        PRIMITIVE_CASES.append((name, fn))
        return fn
    return wrap


@case("add_broadcast")
def _add(rng):
    return (lambda a, b: a + b), [t(rand(rng, 3, 4)), t(rand(rng, 4))]


@case("sub")
def _sub(rng):
    return (lambda a, b: a - b), [t(rand(rng, 2, 3)), t(rand(rng, 2, 3))]


@case("mul_broadcast")
def _mul(rng):
    return (lambda a, b: a * b), [t(rand(rng, 2, 3)), t(rand(rng, 3))]


@case("div")
def _div(rng):
    return (lambda a, b: a / b), [t(rand(rng, 3, 2)), t(rand(rng, 3, 2, away_from=0.0))]


@case("matmul")
def _matmul(rng):
    return (lambda a, b: dc.matmul(a, b)), [t(rand(rng, 3, 4)), t(rand(rng, 4, 2))]


@case("matmul_batched")
def _matmul_b(rng):
    return (lambda a, b: dc.matmul(a, b)), [t(rand(rng, 2, 3, 4)), t(rand(rng, 4, 2))]


@case("reshape")
def _reshape(rng):
    return (lambda a: dc.reshape(a, (6,))), [t(rand(rng, 2, 3))]


@case("transpose")
def _transpose(rng):
    return (lambda a: dc.transpose(a, (1, 2, 0))), [t(rand(rng, 2, 3, 4))]


@case("concat")
def _concat(rng):
    return (lambda a, b: dc.concat([a, b], axis=1)), [t(rand(rng, 2, 3)), t(rand(rng, 2, 2))]


@case("slice")
def _slice(rng):
    return (lambda a: a[1:, ::2]), [t(rand(rng, 3, 4))]


@case("gather")
def _gather(rng):
    idx = rng.integers(0, 4, size=7)
    return (lambda a: dc.gather(a, idx)), [t(rand(rng, 4, 3))]


@case("select_positions")
def _select(rng):
    pos = rng.integers(0, 5, size=3)
    return (lambda a: dc.select_positions(a, pos)), [t(rand(rng, 3, 5, 2))]


@case("sum_axis")
def _sum(rng):
    return (lambda a: dc.tensor_sum(a, axis=1)), [t(rand(rng, 3, 4))]


@case("mean_axis")
def _mean(rng):
    return (lambda a: dc.tensor_mean(a, axis=0, keepdims=True)), [t(rand(rng, 3, 4))]


@case("relu")
def _relu(rng):
    return dc.relu, [t(rand(rng, 3, 4, away_from=0.0))]


@case("sqrt")
def _sqrt(rng):
    return dc.sqrt, [t(np.abs(rand(rng, 3, 3)) + 0.5)]


@case("layer_norm")
def _layer_norm(rng):
    return dc.layer_norm, [t(rand(rng, 2, 5)), t(rand(rng, 5)), t(rand(rng, 5))]


@case("attention_causal")
def _attention(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    return (lambda q, k, v: dc.masked_softmax_attention(q, k, v, mask)), [
        t(rand(rng, 4, 3)), t(rand(rng, 4, 3)), t(rand(rng, 4, 3))]


@case("cross_entropy")
def _ce(rng):
    targets = rng.integers(0, 3, size=(2, 4))
    valid = np.ones((2, 4), dtype=bool)
    valid[0, -1] = False
    return (lambda x: dc.cross_entropy(x, targets, valid)), [t(rand(rng, 2, 4, 3))]


@case("mae")
def _mae(rng):
    pred = rand(rng, 3, 4)
    target = pred + 0.5  # fixed offset keeps FD away from the |.| kink
    return (lambda x: dc.mae(x, target)), [t(pred.copy())]


@case("mlp_composite")
def _mlp(rng):
    def op(x, w1, w2):
        return dc.matmul(dc.relu(dc.matmul(x, w1) + 1.0), w2)
    return op, [t(rand(rng, 2, 3)), t(rand(rng, 3, 4)), t(rand(rng, 4, 2))]


@pytest.mark.parametrize("name,builder", PRIMITIVE_CASES, ids=[n for n, _ in PRIMITIVE_CASES])
def test_primitive_grad_checks_ten_seeds(name, builder):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        op, inputs = builder(rng)
        report = dc.grad_check(op, inputs, tol=1e-4, step=1e-4, rng=np.random.default_rng(99 + seed))
        assert report.passed, f"{name} seed {seed}: max rel err {report.max_rel_err}"


def test_grad_check_identity_passes():
    report = dc.grad_check(lambda x: x, [t([[1.0, 2.0], [3.0, 4.0]])])
    assert report.passed


def test_grad_check_detects_corrupted_backward():
    x = t([[1.0, 2.0], [3.0, 4.0]])

    def bad_scale(v):
        out = dc.Tensor(v.data * 2.0)
        out.requires_grad = True
        out._parents = (v,)
        out._backward_fn = lambda g: v._accumulate(g * 1.7)  # wrong: should be 2.0
        return out

    report = dc.grad_check(bad_scale, [x])
    assert not report.passed
    assert report.failures


# -- masked attention semantics -------------------------------------------------------


def test_attention_all_true_single_position_returns_v():
    v = t([[3.0, -1.0]])
    out = dc.masked_softmax_attention(t([[1.0, 2.0]]), t([[0.5, 0.5]]), v,
                                      np.ones((1, 1), dtype=bool))
    np.testing.assert_array_equal(out.data, v.data)


def test_attention_one_hot_row_copies_v():
    rng = np.random.default_rng(3)
    q, k, v = (t(rng.standard_normal((4, 3))) for _ in range(3))
    mask = np.zeros((4, 4), dtype=bool)
    mask[2, 1] = True
    mask[0, 0] = mask[1, 0] = mask[3, 3] = True
    out = dc.masked_softmax_attention(q, k, v, mask)
    np.testing.assert_array_equal(out.data[2], v.data[1])


def test_attention_disallowed_weights_exactly_zero_per_row():
    rng = np.random.default_rng(7)
    q, k = t(rng.standard_normal((5, 4))), t(rng.standard_normal((5, 4)))
    mask = rng.random((5, 5)) < 0.5
    np.fill_diagonal(mask, True)
    for i in range(5):
        v = t(rng.standard_normal((5, 4)))
        out = dc.masked_softmax_attention(q, k, v, mask)
        dc.tensor_sum(out[i]).backward()
        disallowed = np.flatnonzero(~mask[i])
        assert (v.grad[disallowed] == 0.0).all(), "information leaked through a masked edge"


def test_attention_allowed_rows_sum_to_one_and_empty_rows_zero():
    rng = np.random.default_rng(11)
    q, k, v = (rng.standard_normal((4, 2)) for _ in range(3))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    mask[2, :] = False
    empty_ok = np.array([False, False, True, False])
    out = dc.masked_softmax_attention(t(q), t(k), t(v), mask, empty_rows_ok=empty_ok)
    assert (out.data[2] == 0.0).all()
    with pytest.raises(ValueError):
        dc.masked_softmax_attention(t(q), t(k), t(v), mask)


def test_attention_fd_oracle_on_random_mask():
    rng = np.random.default_rng(21)
    q, k, v = (t(rng.standard_normal((5, 3))) for _ in range(3))
    mask = rng.random((5, 5)) < 0.6
    np.fill_diagonal(mask, True)
    report = dc.grad_check(lambda a, b, c: dc.masked_softmax_attention(a, b, c, mask),
                           [q, k, v], tol=1e-4, step=1e-4)
    assert report.passed, report.max_rel_err


def test_attention_broadcast_batched_heads():
    rng = np.random.default_rng(5)
    q, k, v = (t(rng.standard_normal((2, 2, 4, 3))) for _ in range(3))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    out = dc.masked_softmax_attention(q, k, v, mask)
    assert out.shape == (2, 2, 4, 3)
    report = dc.grad_check(lambda a, b, c: dc.masked_softmax_attention(a, b, c, mask), [q, k, v])
    assert report.passed


# -- layer norm ----------------------------------------------------------------------


def test_layer_norm_constant_row_outputs_bias():
    x = t(np.full((2, 4), 3.7))
    gain, bias = t(np.ones(4)), t(np.arange(4.0))
    out = dc.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, np.broadcast_to(np.arange(4.0), (2, 4)), atol=1e-9)


def test_layer_norm_two_point_row_closed_form():
    out = dc.layer_norm(t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)))
    expected = np.array([[1.0, -1.0]]) / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


# -- cross entropy / mae ----------------------------------------------------------------


def test_cross_entropy_uniform_logits_is_log_c():
    for c in (2, 5, 9):
        out = dc.cross_entropy(t(np.zeros((3, c))), np.zeros(3, dtype=int))
        assert abs(float(out.data) - math.log(c)) < 1e-12


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    out = dc.cross_entropy(t(logits), np.array([2]))
    assert float(out.data) < 1e-20


def test_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(17)
    logits = rng.standard_normal((4, 6, 5)) * 3
    targets = rng.integers(0, 5, size=(4, 6))
    valid = rng.random((4, 6)) < 0.7
    valid[0, 0] = True
    out = dc.cross_entropy(t(logits), targets, valid)

    total = 0.0
    for i in range(4):
        for j in range(6):
            if valid[i, j]:
                row = logits[i, j]
                total += math.log(sum(math.exp(x) for x in row)) - row[targets[i, j]]
    assert abs(float(out.data) - total / valid.sum()) < 1e-10


def test_cross_entropy_requires_valid_positions():
    with pytest.raises(ValueError):
        dc.cross_entropy(t(np.zeros((2, 3))), np.zeros(2, dtype=int), np.zeros(2, dtype=bool))


def test_mae_examples_and_subgradient():
    assert float(dc.mae(t([1.0, 2.0]), np.array([1.0, 2.0])).data) == 0.0
    assert float(dc.mae(t([1.0, -3.0]), np.array([0.0, 0.0])).data) == 2.0

    pred = t([2.0, -1.0, 5.0])
    out = dc.mae(pred, np.array([1.0, -1.0, 7.0]))
    out.backward()
    np.testing.assert_array_equal(pred.grad, np.array([1.0, 0.0, -1.0]) / 3.0)


# -- adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged():
    p = t([1.0, -2.0])
    opt = dc.Adam({"p": p}, lr=0.1)
    before = p.data.copy()
    for _ in range(5):
        p.grad = np.zeros_like(p.data)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_single_step_closed_form():
    p = t(np.array(0.0).reshape(()))
    opt = dc.Adam({"p": p}, lr=1e-3)
    p.grad = np.array(1.0)
    opt.step()
    # bias-corrected first step: mhat = vhat = 1 -> delta = lr / (1 + eps)
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(float(p.data) - expected) < 1e-15


def test_adam_quadratic_bowl_converges():
    # Adam moves about lr per step on this bowl, so lr must let 500 steps span x0.
    x = t(np.array(1.0).reshape(()))
    opt = dc.Adam({"x": x}, lr=1e-2)
    losses = []
    for _ in range(500):
        opt.zero_grad()
        loss = x * x
        loss.backward()
        losses.append(float(loss.data))
        opt.step()
    assert abs(float(x.data)) < 1e-2
    assert losses[-1] < losses[0]
    # broad downward trend: mean of the last tenth far below the first tenth
    assert np.mean(losses[-50:]) < 0.1 * np.mean(losses[:50])


def test_adam_rejects_non_finite_gradient():
    p = t([1.0])
    opt = dc.Adam({"weight": p})
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="weight"):
        opt.step()


# -- determinism / no_grad ------------------------------------------------------------


def _forward_backward_bits(seed):
    rng = np.random.default_rng(seed)
    x = t(rng.standard_normal((4, 6)))
    w = t(rng.standard_normal((6, 3)))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    h = dc.matmul(x, w)
    out = dc.masked_softmax_attention(h, h, h, mask)
    loss = dc.tensor_mean(dc.relu(out))
    loss.backward()
    return loss.data.tobytes() + x.grad.tobytes() + w.grad.tobytes()


def test_forward_backward_bitwise_repeatable():
    assert _forward_backward_bits(123) == _forward_backward_bits(123)


def test_no_grad_builds_no_graph():
    x = t([1.0, 2.0])
    with dc.no_grad():
        y = x * 2.0 + 1.0
    assert not y.requires_grad and y._parents == ()


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_roundtrip_and_byte_stability(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a.w": dc.Tensor(rng.standard_normal((3, 4))), "b": rng.standard_normal(7)}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    dc.save_checkpoint(p1, tensors, meta={"note": "x"})
    dc.save_checkpoint(p2, tensors, meta={"note": "x"})
    assert p1.read_bytes() == p2.read_bytes()

    loaded, meta = dc.load_checkpoint(p1)
    assert meta == {"note": "x"}
    np.testing.assert_array_equal(loaded["a.w"], tensors["a.w"].data)
    np.testing.assert_array_equal(loaded["b"], tensors["b"])


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bogus.bin"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(ValueError):
        dc.load_checkpoint(path)
