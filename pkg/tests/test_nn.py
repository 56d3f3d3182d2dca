import math

import numpy as np
import numpy.testing as npt
import pytest

from raven.errors import CheckpointError, RavenError, ShapeError
from raven.nn import (
    AffineParams,
    ParamStore,
    affine,
    affine_params,
    init_params,
    load_checkpoint,
    lstm_cell_step,
    lstm_params,
    lstm_run,
    save_checkpoint,
)
from raven.tensor import Tape, add, backward, grad_check, matmul, parameter, tensor, tsum


def _scalar_sigma(x):
    return 1.0 / (1.0 + math.exp(-x))


def _scalar_cell(p, x, h, c):
    """Independent per-element recomputation of the cell update."""
    d = p.hidden_size
    h2 = np.zeros(d)
    c2 = np.zeros(d)
    for j in range(d):
        zi = sum(p.w_i.data[j, m] * x[m] for m in range(len(x))) + sum(
            p.u_i.data[j, m] * h[m] for m in range(d)
        ) + p.b_i.data[j]
        zf = sum(p.w_f.data[j, m] * x[m] for m in range(len(x))) + sum(
            p.u_f.data[j, m] * h[m] for m in range(d)
        ) + p.b_f.data[j]
        zo = sum(p.w_o.data[j, m] * x[m] for m in range(len(x))) + sum(
            p.u_o.data[j, m] * h[m] for m in range(d)
        ) + p.b_o.data[j]
        zg = sum(p.w_g.data[j, m] * x[m] for m in range(len(x))) + sum(
            p.u_g.data[j, m] * h[m] for m in range(d)
        ) + p.b_g.data[j]
        c2[j] = _scalar_sigma(zf) * c[j] + _scalar_sigma(zi) * math.tanh(zg)
        h2[j] = _scalar_sigma(zo) * math.tanh(c2[j])
    return h2, c2


def _fresh_lstm(seed, input_size=3, hidden_size=4):
    store = ParamStore()
    p = lstm_params(store, "lstm", input_size, hidden_size)
    init_params(store, seed=seed)
    return store, p


def test_cell_step_zero_params_give_zero_state():
    store = ParamStore()
    p = lstm_params(store, "lstm", 3, 4)  # all-zero params
    x = tensor(np.array([1.0, -2.0, 0.5]))
    h, c = lstm_cell_step(p, x, tensor(np.zeros(4)), tensor(np.zeros(4)))
    npt.assert_array_equal(h.data, np.zeros(4))
    npt.assert_array_equal(c.data, np.zeros(4))


def test_cell_step_saturated_forget_carries_cell_state():
    store = ParamStore()
    p = lstm_params(store, "lstm", 2, 3)
    p.b_f.data[...] = 50.0   # forget gate ~1
    p.b_i.data[...] = -50.0  # input gate ~0
    c0 = np.array([0.3, -1.2, 2.0])
    _, c1 = lstm_cell_step(p, tensor(np.zeros(2)), tensor(np.zeros(3)), tensor(c0))
    npt.assert_allclose(c1.data, c0, rtol=0, atol=1e-12)


def test_cell_step_matches_scalar_oracle():
    rng = np.random.default_rng(31)
    store, p = _fresh_lstm(31)
    x = rng.normal(size=3)
    h = rng.normal(size=4)
    c = rng.normal(size=4)
    h2, c2 = lstm_cell_step(p, tensor(x), tensor(h), tensor(c))
    eh, ec = _scalar_cell(p, x, h, c)
    npt.assert_allclose(h2.data, eh, rtol=0, atol=1e-10)
    npt.assert_allclose(c2.data, ec, rtol=0, atol=1e-10)


def test_lstm_run_length_one_equals_single_cell_step():
    rng = np.random.default_rng(33)
    store, p = _fresh_lstm(33)
    x = rng.normal(size=(1, 3))
    out = lstm_run(p, tensor(x))
    h, _ = lstm_cell_step(p, tensor(x[0]), tensor(np.zeros(4)), tensor(np.zeros(4)))
    assert np.array_equal(out.data, h.data)


def test_lstm_run_zero_params_zero_output():
    store = ParamStore()
    p = lstm_params(store, "lstm", 3, 4)
    out = lstm_run(p, tensor(np.random.default_rng(0).normal(size=(6, 3))))
    npt.assert_array_equal(out.data, np.zeros(4))


@pytest.mark.parametrize("steps", [2, 3, 7, 10])
def test_lstm_run_equals_manual_folding_bitwise(steps):
    rng = np.random.default_rng(100 + steps)
    store, p = _fresh_lstm(100 + steps)
    seq = rng.normal(size=(steps, 3))
    run_out = lstm_run(p, tensor(seq))
    h = tensor(np.zeros(4))
    c = tensor(np.zeros(4))
    for t in range(steps):
        h, c = lstm_cell_step(p, tensor(seq[t]), h, c)
    assert np.array_equal(run_out.data, h.data)


def test_lstm_run_rejects_empty_sequence():
    store, p = _fresh_lstm(1)
    with pytest.raises(ShapeError):
        lstm_run(p, tensor(np.zeros((0, 3))))


def test_lstm_shape_errors():
    store, p = _fresh_lstm(2)
    with pytest.raises(ShapeError):
        lstm_run(p, tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        lstm_cell_step(p, tensor(np.zeros(3)), tensor(np.zeros(5)), tensor(np.zeros(4)))


def test_lstm_run_grad_check():
    rng = np.random.default_rng(37)
    store, p = _fresh_lstm(37)
    seq = parameter(rng.normal(size=(5, 3)))

    def f():
        return tsum(lstm_run(p, seq))

    report = grad_check(f, {"seq": seq, **store.as_dict()}, step=1e-5, tolerance=1e-5)
    assert report.passed, report.summary()


def test_lstm_cell_step_grad_check_through_both_outputs():
    rng = np.random.default_rng(41)
    store, p = _fresh_lstm(41)
    x = parameter(rng.normal(size=3))
    h0 = parameter(rng.normal(size=4))
    c0 = parameter(rng.normal(size=4))

    def f():
        h, c = lstm_cell_step(p, x, h0, c0)
        return add(tsum(h), tsum(c))

    report = grad_check(
        f, {"x": x, "h0": h0, "c0": c0, **store.as_dict()}, step=1e-5, tolerance=1e-5
    )
    assert report.passed, report.summary()


def test_affine_identity_and_bias_only():
    w = AffineParams(weight=tensor(np.eye(3)), bias=tensor(np.zeros(3)))
    x = tensor(np.array([1.0, -2.0, 3.0]))
    npt.assert_array_equal(affine(w, x).data, x.data)
    b = np.array([0.5, 1.5])
    zero_w = AffineParams(weight=tensor(np.zeros((2, 3))), bias=tensor(b))
    npt.assert_array_equal(affine(zero_w, x).data, b)


def test_affine_is_matmul_plus_add_bitwise():
    rng = np.random.default_rng(43)
    w = tensor(rng.normal(size=(4, 3)))
    b = tensor(rng.normal(size=4))
    x = tensor(rng.normal(size=3))
    got = affine(AffineParams(weight=w, bias=b), x)
    expect = add(matmul(w, x), b)
    assert np.array_equal(got.data, expect.data)


def test_affine_bias_shape_checked():
    with pytest.raises(ShapeError):
        AffineParams(weight=tensor(np.zeros((2, 3))), bias=tensor(np.zeros(3)))


def test_init_determinism_and_forget_bias():
    s1 = ParamStore()
    lstm_params(s1, "a", 3, 4)
    affine_params(s1, "head", 2, 4)
    init_params(s1, seed=99)
    s2 = ParamStore()
    lstm_params(s2, "a", 3, 4)
    affine_params(s2, "head", 2, 4)
    init_params(s2, seed=99)
    for name in s1.names():
        assert np.array_equal(s1[name].data, s2[name].data), name
    npt.assert_array_equal(s1["a/b_f"].data, np.ones(4))
    npt.assert_array_equal(s1["a/b_i"].data, np.zeros(4))
    npt.assert_array_equal(s1["head/bias"].data, np.zeros(2))


def test_init_uniform_sample_mean_within_bounds():
    store = ParamStore()
    store.register("big", parameter(np.zeros((100, 100))))
    init_params(store, seed=7)
    w = store["big"].data
    s = math.sqrt(6.0 / 200)
    assert np.all(np.abs(w) <= s)
    # |sample mean| below 3 sigma of the mean of 10^4 uniform draws
    assert abs(w.mean()) < 3 * s / math.sqrt(12 * w.size)


def test_param_count_formula():
    store = ParamStore()
    d, k = 7, 5
    lstm_params(store, "l", k, d)
    assert store.total_count() == 4 * (d * k + d * d + d)


def test_param_store_rejects_duplicates():
    store = ParamStore()
    store.register("x", parameter(np.zeros(2)))
    with pytest.raises(RavenError):
        store.register("x", parameter(np.zeros(2)))


def test_checkpoint_roundtrip_bitwise(tmp_path):
    store, p = _fresh_lstm(55)
    affine_params(store, "head", 2, 4)
    init_params(store, seed=55)
    # make values "awkward": denormals, negative zero, exact halves
    store["head/weight"].data[0, 0] = -0.0
    store["head/weight"].data[0, 1] = 5e-324
    path = tmp_path / "params.bin"
    save_checkpoint(path, store)
    arrays = load_checkpoint(path)
    assert list(arrays) == store.names()
    for name, arr in arrays.items():
        assert arr.tobytes() == store[name].data.tobytes(), name

    fresh = ParamStore()
    lstm_params(fresh, "lstm", 3, 4)
    affine_params(fresh, "head", 2, 4)
    fresh.load_state(arrays)
    for name in store.names():
        assert fresh[name].data.tobytes() == store[name].data.tobytes()


def test_checkpoint_shape_and_name_mismatches(tmp_path):
    store, _ = _fresh_lstm(1)
    path = tmp_path / "params.bin"
    save_checkpoint(path, store)
    other = ParamStore()
    lstm_params(other, "lstm", 3, 5)  # different hidden size
    with pytest.raises(CheckpointError):
        other.load_state(load_checkpoint(path))
    renamed = ParamStore()
    lstm_params(renamed, "different", 3, 4)
    with pytest.raises(CheckpointError):
        renamed.load_state(load_checkpoint(path))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_evaluation_without_tape_records_nothing():
    store, p = _fresh_lstm(66)
    seq = tensor(np.random.default_rng(2).normal(size=(4, 3)))
    with Tape() as tape:
        lstm_run(p, seq)
        recorded = len(tape)
    assert recorded == 1
    out = lstm_run(p, seq)  # no tape active: plain constant
    assert out.op is None and not out.requires_grad
