import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadgru.model import (
    ENCODER_GEOMETRY,
    PER_STEP,
    SEQUENCE_FINAL,
    ContextProcessorParams,
    DecoderParams,
    GRUCellParams,
    ModelConfig,
    check_params,
    count_params,
    decode,
    encode,
    forward,
    gru_step,
    init_params,
    map_params,
    named_tensors,
    run_context_processor,
    watch_params,
)
from roadgru.tensor import ShapeError, Tape, Tensor, conv2d, conv_output_shape, relu

from helpers import TOL, max_relative_error, numerical_gradients

TINY = ModelConfig(conv_channels=(3, 2, 3, 2), hidden=3, decoder_width=4)


@pytest.fixture(scope="module")
def full_params():
    return init_params(seed=0)


@pytest.fixture(scope="module")
def rand_input():
    return np.random.default_rng(0).random((150, 600, 5)).astype(np.float32)


def zero_tree(tree):
    return map_params(tree, lambda _, v: np.zeros_like(v))


def random_cell(rng, features, hidden):
    w = lambda *s: rng.uniform(-1, 1, s)
    return GRUCellParams(w(features, hidden), w(features, hidden), w(features, hidden),
                         w(hidden, hidden), w(hidden, hidden), w(hidden, hidden),
                         w(hidden), w(hidden), w(hidden))


# --- parameter counts ---------------------------------------------------------


def test_encoder_parameter_count(full_params):
    expected = sum(kh * kw * cin * cout + cout for (kh, kw, cin, cout) in
                   [(11, 11, 5, 256), (1, 1, 256, 128), (5, 5, 128, 256), (15, 1, 256, 256)])
    assert expected == 1_990_784
    assert count_params(full_params.encoder) == expected


def test_processor_parameter_count(full_params):
    assert count_params(full_params.lr_processor) == 2 * 3 * (256 * 128 + 128 * 128 + 128) == 295_680
    assert count_params(full_params.top_processor) == 295_680


def test_total_parameter_count(full_params):
    # encoder + 2 processors + decoders (256->64->2, 256->64->1)
    assert count_params(full_params) == 1_990_784 + 2 * 295_680 + (256 * 64 + 64 + 64 * 2 + 2) \
        + (256 * 64 + 64 + 64 + 1) == 2_615_235
    assert 2_370_000 <= count_params(full_params) <= 3_210_000


def test_init_is_deterministic_and_glorot():
    a, b = init_params(TINY, seed=3), init_params(TINY, seed=3)
    for (n, x), y in zip(named_tensors(a).items(), named_tensors(b).values()):
        assert np.array_equal(x, y), n
    k = init_params(seed=0).encoder.conv1.kernel
    limit = np.sqrt(6 / (11 * 11 * 5 + 11 * 11 * 256))
    assert np.abs(k).max() <= limit
    assert not np.any(init_params(seed=0).encoder.conv1.bias)


def test_check_params_rejects_inconsistent_shapes():
    p = init_params(TINY)
    check_params(p)
    p.lr_decoder.w2 = np.zeros((4, 3))
    with pytest.raises(ShapeError):
        check_params(p)


# --- encoder ------------------------------------------------------------------


def test_encoder_layer_shapes():
    h, w, shapes = 150, 600, []
    for (kh, kw), stride, pad in ENCODER_GEOMETRY:
        h, w = conv_output_shape(h, w, kh, kw, stride, pad)
        shapes.append((h, w))
    assert shapes == [(30, 120), (30, 120), (15, 60), (1, 60)]


def test_encoder_output_shape(full_params, rand_input):
    feats = encode(rand_input, full_params.encoder)
    assert feats.shape == (60, 256)


def test_encoder_zero_input_zero_bias(full_params):
    out = encode(np.zeros((150, 600, 5), np.float32), full_params.encoder)
    assert not np.any(out.data)


def test_encoder_rejects_wrong_shape(full_params):
    with pytest.raises(ShapeError):
        encode(np.zeros((600, 150, 5), np.float32), full_params.encoder)


def _symmetric_encoder():
    p = init_params(TINY, seed=1, dtype=np.float64).encoder
    return map_params(p, lambda _, v: 0.5 * (v + v[:, ::-1]) if v.ndim == 4 else v + 0.1)


def test_mirror_equivariance_first_stage():
    # stride-5 layer has window centres 5j+2, symmetric under c -> 599-c
    enc = _symmetric_encoder()
    x = np.random.default_rng(2).random((150, 600, 5))

    def stage(img):
        h = img
        for layer, (_, stride, pad) in zip(enc.layers()[:2], ENCODER_GEOMETRY[:2]):
            h = relu(conv2d(h, layer.kernel, layer.bias, stride, pad))
        return h.data

    np.testing.assert_allclose(stage(x[:, ::-1])[:, ::-1], stage(x), rtol=0, atol=1e-12)


def test_mirror_equivariance_full_encoder():
    # the stride-2 layer over 120 columns has centres 2j, so the exact mirror
    # of the sequence is j <-> 60-j under the image map c -> 604-c
    enc = _symmetric_encoder()
    x = np.random.default_rng(3).random((150, 600, 5))
    mirrored = np.zeros_like(x)
    mirrored[:, 5:] = x[:, ::-1][:, :595]
    f = encode(x, enc).data
    g = encode(mirrored, enc).data
    for j in range(2, 59):
        np.testing.assert_allclose(g[j], f[60 - j], rtol=0, atol=1e-12)


# --- GRU ----------------------------------------------------------------------


def test_gru_step_zero_weights():
    cell = zero_tree(random_cell(np.random.default_rng(0), 5, 4))
    v = np.array([1.0, -2.0, 0.5, 3.0])
    h = gru_step(np.random.default_rng(1).normal(size=5), v, cell)
    np.testing.assert_allclose(h.data, 0.5 * v, rtol=0, atol=1e-15)


def test_gru_step_from_zero_state():
    rng = np.random.default_rng(2)
    cell = random_cell(rng, 5, 4)
    for name in ("Uz", "Ur", "Uh", "bz", "br", "bh"):
        setattr(cell, name, np.zeros_like(getattr(cell, name)))
    x = rng.normal(size=5)
    h = gru_step(x, np.zeros(4), cell)
    sig = 1 / (1 + np.exp(-(x @ cell.Wz)))
    np.testing.assert_allclose(h.data, sig * np.tanh(x @ cell.Wh), rtol=1e-13, atol=1e-15)


def test_gru_step_rejects_bad_shapes():
    cell = random_cell(np.random.default_rng(0), 5, 4)
    with pytest.raises(ShapeError):
        gru_step(np.zeros(6), np.zeros(4), cell)
    with pytest.raises(ShapeError):
        gru_step(np.zeros(5), np.zeros(3), cell)


def test_gru_five_step_chain_gradients():
    rng = np.random.default_rng(4)
    cell = random_cell(rng, 4, 3)
    names = list(named_tensors(cell))
    xs = rng.uniform(-1, 1, (5, 4))
    h0 = rng.uniform(-1, 1, 3)
    w_out = rng.uniform(-1, 1, 3)

    def run(xs, h0, *cell_arrays):
        c = GRUCellParams(*[Tensor(a) if not isinstance(a, Tensor) else a for a in cell_arrays])
        h = h0
        for t in range(5):
            h = gru_step(xs[t] if not isinstance(xs, Tensor) else xs[t], h, c)
        return (h * w_out).sum()

    arrays = [xs, h0] + [getattr(cell, n) for n in names]
    tape = Tape()
    leaves = [tape.watch(a, f"a{i}") for i, a in enumerate(arrays)]
    grads = tape.backward(run(*leaves))
    numeric = numerical_gradients(lambda *a: run(*[Tensor(v) for v in a]).item(), arrays)
    for i, n in enumerate(numeric):
        assert max_relative_error(grads[f"a{i}"], n) < TOL


def _processor(rng, mode, features=6, hidden=3, shared=False):
    fwd = random_cell(rng, features, hidden)
    bwd = fwd if shared else random_cell(rng, features, hidden)
    return ContextProcessorParams(fwd, bwd, mode)


def test_processor_output_shapes(full_params):
    seq = np.random.default_rng(5).normal(size=(60, 256)).astype(np.float32)
    assert run_context_processor(seq, full_params.lr_processor).shape == (256,)
    assert run_context_processor(seq, full_params.top_processor).shape == (60, 256)
    with pytest.raises(ShapeError):
        run_context_processor(seq[:59], full_params.lr_processor)


def test_processor_zero_weights_stay_at_zero():
    proc = zero_tree(_processor(np.random.default_rng(0), PER_STEP))
    out = run_context_processor(np.random.default_rng(1).normal(size=(60, 6)), proc)
    assert not np.any(out.data)


def test_processor_final_states():
    rng = np.random.default_rng(6)
    proc = _processor(rng, SEQUENCE_FINAL)
    seq = rng.normal(size=(60, 6))
    per_step = run_context_processor(seq, ContextProcessorParams(proc.forward_cell,
                                                                 proc.backward_cell, PER_STEP)).data
    final = run_context_processor(seq, proc).data
    np.testing.assert_array_equal(final[:3], per_step[59, :3])  # forward state after index 59
    np.testing.assert_array_equal(final[3:], per_step[0, 3:])  # backward state after index 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**16))
def test_processor_reversal_property(seed):
    rng = np.random.default_rng(seed)
    proc = _processor(rng, PER_STEP, shared=True)
    seq = rng.normal(size=(60, 6))
    out = run_context_processor(seq, proc).data
    out_rev = run_context_processor(seq[::-1].copy(), proc).data
    # backward half over seq == forward half over reversed seq, reversed
    np.testing.assert_allclose(out[:, 3:], out_rev[::-1, :3], rtol=0, atol=1e-12)


def test_processor_batched_matches_single():
    rng = np.random.default_rng(7)
    proc = _processor(rng, PER_STEP)
    seqs = rng.normal(size=(3, 60, 6))
    batched = run_context_processor(seqs, proc).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], run_context_processor(seqs[i], proc).data,
                                   rtol=0, atol=1e-13)


# --- decoders -----------------------------------------------------------------


def test_decoder_zero_weights():
    dec = DecoderParams(np.zeros((8, 4)), np.zeros(4), np.zeros((4, 2)), np.zeros(2))
    np.testing.assert_array_equal(decode(np.ones(8), dec).data, [0.25, 0.25])


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(0, 2**16))
def test_decoder_bounded(scale, seed):
    rng = np.random.default_rng(seed)
    dec = DecoderParams(rng.normal(size=(8, 4)), rng.normal(size=4),
                        rng.normal(size=(4, 1)), rng.normal(size=1))
    out = decode(rng.normal(size=(5, 8)) * scale, dec).data
    assert np.all((out >= 0) & (out <= 0.5))


def test_decoder_gradients():
    rng = np.random.default_rng(8)
    arrays = [rng.uniform(-1, 1, (3, 6)), rng.uniform(-1, 1, (6, 4)), rng.uniform(-1, 1, 4),
              rng.uniform(-1, 1, (4, 2)), rng.uniform(-1, 1, 2)]
    w_out = rng.uniform(-1, 1, (3, 2))

    def f(ctx, *p):
        return (decode(ctx, DecoderParams(*p)) * w_out).sum()

    tape = Tape()
    leaves = [tape.watch(a, f"a{i}") for i, a in enumerate(arrays)]
    grads = tape.backward(f(*leaves))
    numeric = numerical_gradients(lambda *a: f(*[Tensor(v) for v in a]).item(), arrays)
    for i, n in enumerate(numeric):
        assert max_relative_error(grads[f"a{i}"], n) < TOL


# --- full forward -------------------------------------------------------------


def test_forward_invariants(full_params, rand_input):
    pred = forward(rand_input, full_params).numpy()
    assert pred.top.shape == (60,) and pred.top_upsampled.shape == (600,)
    for v in (pred.left, pred.right, pred.top, pred.top_upsampled):
        assert np.all((v >= 0) & (v <= 0.5))
    again = forward(rand_input, full_params).numpy()
    assert np.array_equal(pred.top_upsampled, again.top_upsampled)
    assert pred.left == again.left and pred.right == again.right


def test_forward_unnormalized_input_bounded():
    p = init_params(TINY, seed=2)
    x = np.random.default_rng(1).normal(0, 1000, (150, 600, 5)).astype(np.float32)
    pred = forward(x, p).numpy()
    for v in (pred.left, pred.right, pred.top):
        assert np.all(np.isfinite(v)) and np.all((v >= 0) & (v <= 0.5))


def test_zero_parameters_fixed_point(rand_input):
    p = zero_tree(init_params(TINY))
    pred = forward(rand_input, p).numpy()
    assert pred.left == 0.25 and pred.right == 0.25
    np.testing.assert_array_equal(pred.top, np.full(60, 0.25))
    np.testing.assert_allclose(pred.top_upsampled, np.full(600, 0.25), rtol=0, atol=1e-7)


def test_gradient_reaches_every_parameter(full_params):
    rng = np.random.default_rng(9)
    x = rng.random((2, 150, 600, 5)).astype(np.float32)
    before = count_params(full_params)
    tape = Tape()
    pred = forward(x, watch_params(full_params, tape))
    loss = ((pred.top - rng.uniform(0, 0.5, (2, 60))).abs().sum()
            + (pred.left - 0.1).abs().sum() + (pred.right - 0.2).abs().sum())
    grads = tape.backward(loss)
    assert set(grads) == set(named_tensors(full_params))
    dead = [n for n, g in grads.items() if not np.any(g)]
    assert dead == []
    assert count_params(full_params) == before


def test_whole_model_gradients_sampled():
    """FD check through the complete network at reduced width, on sampled coordinates."""
    p = init_params(TINY, seed=5, dtype=np.float64)
    p = map_params(p, lambda n, v: v + 0.05 if n.endswith(("bias", "b1", "b2")) else v)
    rng = np.random.default_rng(10)
    x = rng.random((150, 600, 5))
    target_top = rng.uniform(0, 0.5, 60)
    names = list(named_tensors(p))
    arrays = [named_tensors(p)[n] for n in names]
    coords = [rng.choice(a.size, size=min(3, a.size), replace=False) for a in arrays]

    def loss_of(tree):
        pred = forward(x, tree)
        return (pred.top - target_top).abs().mean() + (pred.left - 0.01).abs() + (pred.right - 0.02).abs()

    def rebuild(arrs):
        lookup = dict(zip(names, arrs))
        return map_params(p, lambda n, _: lookup[n])

    tape = Tape()
    grads = tape.backward(loss_of(watch_params(p, tape)))
    numeric = numerical_gradients(lambda *a: loss_of(rebuild(a)).item(), arrays, coords=coords)
    for n, num in zip(names, numeric):
        assert max_relative_error(grads[n], num) < TOL, n
