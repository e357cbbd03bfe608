import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fd_check
from pneumollm.engine import (
    CocoopStyleParams, EngineParams, FixedPromptParams, conditional_prompt_forward,
    context_maps, engine_forward, engine_forward_batch, engine_hidden_width,
    fixed_prompt_forward,
)
from pneumollm.numeric import DimensionError, Tape, Tensor, mul, sum_all
from pneumollm.training import AdamState, TrainConfig, adamw_step


def make_engine(n, m, seed=0, scale=1.0):
    p = EngineParams.create(n, m, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 100)
    for q in p.params():
        q.value[...] = scale * r.normal(size=q.shape)
    return p


def loop_oracle(x, p):
    """Straight-loop recomputation of the context map and diagnosis tokens."""
    d, n = x.shape
    w1, b1, w2, b2 = (q.value for q in p.params())
    h, m = w1.shape[1], w2.shape[1]
    logits = [[0.0] * m for _ in range(d)]
    for i in range(d):
        hidden = []
        for j in range(h):
            acc = b1[0, j]
            for k in range(n):
                acc += x[i, k] * w1[k, j]
            hidden.append(max(acc, 0.0))
        for c in range(m):
            acc = b2[0, c]
            for j in range(h):
                acc += hidden[j] * w2[j, c]
            logits[i][c] = acc
    mc = [[0.0] * m for _ in range(d)]
    for c in range(m):
        top = max(logits[i][c] for i in range(d))
        z = sum(math.exp(logits[i][c] - top) for i in range(d))
        for i in range(d):
            mc[i][c] = math.exp(logits[i][c] - top) / z
    xhat = [[sum(mc[i][c] * x[i, k] for i in range(d)) for k in range(n)] for c in range(m)]
    return np.array(mc), np.array(xhat)


def test_hidden_width_floor():
    assert engine_hidden_width(24) == 2
    assert engine_hidden_width(5) == 1
    assert EngineParams.create(5, 3, np.random.default_rng(0)).w1.shape == (5, 1)


def test_zero_logits_give_uniform_map(rng):
    p = make_engine(24, 4)
    p.w2.value[...] = 0.0
    p.b2.value[...] = 0.0
    x = rng.normal(size=(6, 24))
    mc, xhat = engine_forward(Tensor(x), p)
    assert np.allclose(mc.value, 1 / 6, rtol=0, atol=1e-15)
    for row in xhat.value:
        np.testing.assert_allclose(row, x.mean(axis=0), rtol=0, atol=1e-14)


def test_saturated_softmax_copies_source_token(rng):
    p = make_engine(24, 2)
    x = rng.normal(size=(2, 24))
    x[0, 0], x[1, 0] = 1.0, -1.0
    p.w1.value[...] = 0.0
    p.w1.value[0, 0] = 1.0  # hidden unit 0 = relu(x[:, 0]) = (1, 0)
    p.b1.value[...] = 0.0
    p.w2.value[...] = 0.0
    p.w2.value[0, 0] = 40.0
    p.b2.value[...] = 0.0
    p.b2.value[0, 0] = -20.0  # column 0 logits = (+20, -20)
    _, xhat = engine_forward(Tensor(x), p)
    assert np.max(np.abs(xhat.value[0] - x[0])) < 1e-8


def test_matches_loop_oracle(rng):
    x = rng.normal(size=(3, 24))
    p = make_engine(24, 4, seed=3)
    mc, xhat = engine_forward(Tensor(x), p)
    mc_ref, xhat_ref = loop_oracle(x, p)
    assert xhat.shape == (4, 24)
    assert np.max(np.abs(mc.value - mc_ref)) < 1e-12
    assert np.max(np.abs(xhat.value - xhat_ref)) < 1e-12


def test_zero_width_rejected():
    p = make_engine(4, 2)
    with pytest.raises(DimensionError):
        engine_forward(Tensor(np.zeros((3, 0))), p)
    with pytest.raises(DimensionError):
        EngineParams.create(0, 2, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 8), m=st.integers(1, 6), n=st.integers(1, 30),
       seed=st.integers(0, 2**32 - 1))
def test_column_stochastic_and_convex_hull(d, m, n, seed):
    r = np.random.default_rng(seed)
    x = r.normal(scale=3, size=(d, n))
    p = make_engine(n, m, seed=seed % 1000, scale=2.0)
    mc, xhat = engine_forward(Tensor(x), p)
    assert np.all(np.abs(mc.value.sum(axis=0) - 1.0) < 1e-12)
    assert np.all((mc.value >= 0) & (mc.value <= 1))
    lo, hi = x.min(axis=0), x.max(axis=0)
    tol = 1e-12 * (1 + np.abs(x).max())
    assert np.all(xhat.value >= lo - tol) and np.all(xhat.value <= hi + tol)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(2, 7), seed=st.integers(0, 2**32 - 1))
def test_permutation_equivariance(d, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(d, 24))
    p = make_engine(24, 4, seed=seed % 1000)
    perm = r.permutation(d)
    mc, xhat = engine_forward(Tensor(x), p)
    mc_p, xhat_p = engine_forward(Tensor(x[perm]), p)
    assert np.max(np.abs(mc_p.value - mc.value[perm])) < 1e-12
    assert np.max(np.abs(xhat_p.value - xhat.value)) < 1e-12


def test_row_axis_alternative(rng):
    x = rng.normal(size=(5, 24))
    p = make_engine(24, 3)
    mc, xhat = engine_forward(Tensor(x), p, axis="row")
    assert np.all(np.abs(mc.value.sum(axis=1) - 1.0) < 1e-12)
    np.testing.assert_allclose(xhat.value, mc.value.T @ x, rtol=0, atol=1e-13)
    with pytest.raises(ValueError):
        engine_forward(Tensor(x), p, axis="diagonal")


@pytest.mark.parametrize("axis", ["column", "row"])
def test_batch_output_depends_only_on_own_sample(axis, rng):
    p = make_engine(24, 4)
    xs = [rng.normal(size=(6, 24)) for _ in range(3)]
    mix, xhat = engine_forward_batch(Tensor(np.concatenate(xs)), p, 3, axis)
    maps = context_maps(mix, 3, 4)
    for b, x in enumerate(xs):
        mc, single = engine_forward(Tensor(x), p, axis)
        assert np.max(np.abs(xhat.value[4 * b:4 * b + 4] - single.value)) < 1e-13
        assert np.max(np.abs(maps[b] - mc.value)) < 1e-13
    # changing sample 2 leaves samples 0 and 1 untouched
    xs[2] = xs[2] + 5.0
    _, again = engine_forward_batch(Tensor(np.concatenate(xs)), p, 3, axis)
    assert np.array_equal(again.value[:8], xhat.value[:8])


def test_engine_gradient(rng):
    x = rng.normal(size=(3, 12))
    p = make_engine(12, 2)
    b2 = Tensor(p.b2.value)

    # the output bias shifts a whole column of logits, which the column
    # softmax ignores, so it is checked separately below
    def f(w1, b1, w2):
        return engine_forward(Tensor(x), EngineParams(w1, b1, w2, b2))[1]

    assert fd_check(f, [p.w1.shape, p.b1.shape, p.w2.shape], rng) < 1e-6

    weights = Tensor(rng.normal(size=(2, 12)))
    with Tape() as tape:
        tape.backward(sum_all(mul(engine_forward(Tensor(x), p)[1], weights)))
    assert np.max(np.abs(p.b2.grad)) < 1e-12


def test_engine_gradient_row_axis(rng):
    x = rng.normal(size=(3, 12))
    p = make_engine(12, 2)

    def f(w1, b1, w2, b2):
        return engine_forward(Tensor(x), EngineParams(w1, b1, w2, b2), axis="row")[1]

    assert fd_check(f, [q.shape for q in p.params()], rng) < 1e-6


def test_fixed_prompt_is_input_independent_and_trainable(rng):
    p = FixedPromptParams.create(24, 4, rng)
    a, b = fixed_prompt_forward(p), fixed_prompt_forward(p)
    assert a.shape == (4, 24)
    assert a.value.tobytes() == b.value.tobytes()
    with Tape() as tape:
        tape.backward(sum_all(fixed_prompt_forward(p)))
    before = p.tokens.value.copy()
    adamw_step(p.params(), [q.grad for q in p.params()], AdamState(), 1e-3, TrainConfig())
    assert not np.array_equal(fixed_prompt_forward(p).value, before)


def test_conditional_prompt_reduces_to_fixed(rng):
    p = CocoopStyleParams.create(24, 4, rng)
    p.offset.value[...] = 0.0
    fixed = FixedPromptParams(p.tokens)
    x1, x2 = rng.normal(size=(6, 24)), rng.normal(size=(6, 24))
    assert np.array_equal(conditional_prompt_forward(Tensor(x1), p).value,
                          fixed_prompt_forward(fixed).value)
    assert np.array_equal(conditional_prompt_forward(Tensor(x1), p).value,
                          conditional_prompt_forward(Tensor(x2), p).value)
    p.offset.value[...] = rng.normal(size=p.offset.shape)
    assert not np.array_equal(conditional_prompt_forward(Tensor(x1), p).value,
                              conditional_prompt_forward(Tensor(x2), p).value)


def test_conditional_prompt_gradient(rng):
    x = rng.normal(size=(4, 6))

    def f(tokens, offset):
        return conditional_prompt_forward(Tensor(x), CocoopStyleParams(tokens, offset))

    assert fd_check(f, [(3, 6), (6, 6)], rng) < 1e-4


def test_conditional_prompt_batch_matches_single(rng):
    p = CocoopStyleParams.create(8, 2, rng)
    xs = [rng.normal(size=(3, 8)) for _ in range(2)]
    batched = conditional_prompt_forward(Tensor(np.concatenate(xs)), p, batch=2).value
    for b, x in enumerate(xs):
        single = conditional_prompt_forward(Tensor(x), p).value
        assert np.max(np.abs(batched[2 * b:2 * b + 2] - single)) < 1e-14
