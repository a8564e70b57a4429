"""Residual blocks, ConvLSTM, Mask-GAM, encoder and decoder."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecnet import tensor as T
from ecnet.blocks import (ConvLstmCell, Decoder, Encoder, MaskGam, RecurrentResidualBlock, ResidualBlock,
                          zero_state)
from ecnet.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def randt(shape, seed=0, scale=1.0):
    return Tensor(scale * rng(seed).standard_normal(shape))


def zero_module(module):
    for p in module.parameters().values():
        p.data[...] = 0


def randomize(module, seed=0, std=0.3):
    r = rng(seed)
    for p in module.parameters().values():
        p.data[...] = std * r.standard_normal(p.shape)


# ---------------------------------------------------------------- residual block

def test_rb_fresh_block_is_near_identity():
    x = randt((2, 8, 6, 6))
    y = ResidualBlock(8, rng(), dtype=np.float64)(x).data
    assert 0 < np.abs(y - x.data).std() < 0.25 * x.data.std()


def test_rb_zero_weights_identity_and_gradient():
    rb = ResidualBlock(4, rng(), dtype=np.float64)
    zero_module(rb)
    x = Tensor(rng(1).standard_normal((1, 4, 5, 5)), requires_grad=True)
    with T.Tape() as tape:
        y = rb(x)
        loss = T.reduce_mean(y)
    np.testing.assert_array_equal(y.data, x.data)
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 1.0 / x.size)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9))
def test_rb_preserves_shape(h, w):
    rb = ResidualBlock(4, rng(), dtype=np.float64)
    randomize(rb)
    assert rb(randt((1, 4, h, w))).shape == (1, 4, h, w)


def test_rb_formula():
    rb = ResidualBlock(3, rng(), dtype=np.float64)
    randomize(rb, 3)
    x = randt((1, 3, 4, 4), 4)
    expect = x.data + rb.conv2(T.relu(rb.conv1(x))).data
    np.testing.assert_allclose(rb(x).data, expect, atol=1e-14)


# ---------------------------------------------------------------- ConvLSTM

def test_lstm_zero_weights_zero_state():
    cell = ConvLstmCell(4, rng(), dtype=np.float64)
    zero_module(cell)
    x = randt((1, 4, 5, 5))
    h, c = zero_state(x)
    h1, c1 = cell(x, h, c)
    assert np.all(h1.data == 0) and np.all(c1.data == 0)


def test_lstm_saturated_memory():
    cell = ConvLstmCell(4, rng(), dtype=np.float64)
    randomize(cell)
    w_f, b_f = cell.gate("f")
    w_i, b_i = cell.gate("i")
    w_f[...] = 0
    w_i[...] = 0
    b_f[...] = 20.0
    b_i[...] = -20.0
    x, h, c = randt((1, 4, 5, 5), 1), randt((1, 4, 5, 5), 2), randt((1, 4, 5, 5), 3)
    _, c1 = cell(x, h, c)
    assert np.abs(c1.data - c.data).max() < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_lstm_gates_and_cell_bound(seed):
    cell = ConvLstmCell(3, rng(seed), dtype=np.float64)
    # logits beyond ~37 round sigmoid to exactly 1.0 in f64, so keep them moderate
    randomize(cell, seed, std=0.5)
    x, h, c = (randt((1, 3, 4, 4), seed + k, 2.0) for k in (1, 2, 3))
    maps = cell.gate_maps(x, h)
    for g in ("i", "f", "o"):
        assert np.all((maps[g].data > 0) & (maps[g].data < 1))
    h1, c1 = cell(x, h, c)
    assert h1.shape == c1.shape == x.shape
    assert np.all(np.abs(c1.data) <= np.abs(c.data) + 1 + 1e-12)


def test_lstm_shape_mismatch():
    cell = ConvLstmCell(3, rng())
    with pytest.raises(ValueError):
        cell(T.zeros([1, 3, 4, 4]), T.zeros([1, 3, 4, 4]), T.zeros([1, 3, 2, 2]))


# ---------------------------------------------------------------- recurrent residual block

def test_rrb_none_state_equals_zero_state():
    rrb = RecurrentResidualBlock(4, rng(), dtype=np.float64)
    randomize(rrb)
    x = randt((1, 4, 6, 6), 5)
    y0, (h0, c0) = rrb(x, None)
    a = T.relu(rrb.conv1(x))
    y1, (h1, c1) = rrb(x, zero_state(a))
    np.testing.assert_array_equal(y0.data, y1.data)
    np.testing.assert_array_equal(h0.data, h1.data)
    np.testing.assert_array_equal(c0.data, c1.data)


def test_rrb_zero_lstm_and_conv2_is_identity():
    rrb = RecurrentResidualBlock(4, rng(), dtype=np.float64)
    randomize(rrb)
    zero_module(rrb.lstm)
    rrb.conv2.zero_()
    x = randt((1, 4, 6, 6), 6)
    y, _ = rrb(x, (randt((1, 4, 6, 6), 7), randt((1, 4, 6, 6), 8)))
    np.testing.assert_array_equal(y.data, x.data)


def test_rrb_with_closed_output_gate_reproduces_rb():
    rrb = RecurrentResidualBlock(4, rng(), dtype=np.float64)
    randomize(rrb)
    w_o, b_o = rrb.lstm.gate("o")
    w_o[...] = 0
    b_o[...] = -1e4
    rb = ResidualBlock(4, rng(), dtype=np.float64)
    rb.conv1.w.data[...] = rrb.conv1.w.data
    rb.conv1.b.data[...] = rrb.conv1.b.data
    rb.conv2.w.data[...] = rrb.conv2.w.data
    rb.conv2.b.data[...] = rrb.conv2.b.data
    x = randt((2, 4, 5, 5), 9)
    y, _ = rrb(x, (randt((2, 4, 5, 5), 10), randt((2, 4, 5, 5), 11)))
    np.testing.assert_array_equal(y.data, rb(x).data)


def test_rrb_state_threading_matters():
    rrb = RecurrentResidualBlock(4, rng(), dtype=np.float64)
    randomize(rrb)
    w_f, b_f = rrb.lstm.gate("f")
    w_f[...] = 0
    b_f[...] = 20.0
    x = randt((1, 4, 6, 6), 12)
    y1, st1 = rrb(x, None)
    y2_threaded, _ = rrb(x, st1)
    y2_fresh, _ = rrb(x, None)
    np.testing.assert_array_equal(y1.data, y2_fresh.data)
    assert np.abs(y2_threaded.data - y2_fresh.data).max() > 1e-3


# ---------------------------------------------------------------- Mask-GAM

def test_gam_zero_weights_half_gate():
    gam = MaskGam(8, rng(), dtype=np.float64)
    zero_module(gam)
    f, fd = randt((1, 8, 4, 4), 1), randt((1, 4, 4, 4), 2)
    gated, m = gam(f, fd)
    assert m.shape == (1, 1, 4, 4) and np.all(m.data == 0.5)
    np.testing.assert_array_equal(gated.data, 0.5 * f.data)


def test_gam_closed_gate():
    gam = MaskGam(8, rng(), dtype=np.float64)
    randomize(gam, std=0.1)
    gam.att.b.data[...] = -20.0
    f, fd = randt((1, 8, 4, 4), 3), randt((1, 4, 4, 4), 4)
    gated, _ = gam(f, fd)
    assert np.abs(gated.data).max() < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_gam_map_in_open_interval(seed):
    gam = MaskGam(8, rng(seed), dtype=np.float64)
    randomize(gam, seed, std=0.5)
    _, m = gam(randt((2, 8, 4, 4), seed + 1), randt((2, 4, 4, 4), seed + 2))
    assert np.all((m.data > 0) & (m.data < 1))


def test_gam_formula_and_contract():
    gam = MaskGam(8, rng(), dtype=np.float64)
    randomize(gam, 5)
    f, fd = randt((1, 8, 4, 4), 6), randt((1, 4, 4, 4), 7)
    pre = gam.att(T.relu(T.add(gam.enc(f), gam.dec(fd)))).data
    gated, m = gam(f, fd)
    np.testing.assert_allclose(m.data, 1 / (1 + np.exp(-pre)), atol=1e-14)
    np.testing.assert_allclose(gated.data, m.data * f.data, atol=1e-14)
    with pytest.raises(ValueError):
        gam(f, randt((1, 8, 4, 4)))
    with pytest.raises(ValueError):
        gam(f, randt((1, 4, 2, 2)))
    with pytest.raises(ValueError):
        MaskGam(7, rng())


# ---------------------------------------------------------------- encoder / decoder

def test_encoder_shapes_desk():
    enc = Encoder(6, (8, 16, 32, 64), rng())
    z, feats, states = enc(T.zeros([1, 6, 32, 32]))
    assert z.shape == (1, 64, 4, 4)
    assert [f.shape[1:] for f in feats] == [(8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert states is None


def test_encoder_full_width_shapes():
    enc = Encoder(6, (32, 64, 128, 256), rng())
    z, _, _ = enc(T.zeros([1, 6, 96, 96]))
    assert z.shape == (1, 256, 12, 12)


def test_ae_and_ecnet_encoders_agree_on_embedding_shape():
    z3, _, _ = Encoder(3, (8, 16, 32, 64), rng())(T.zeros([2, 3, 16, 16]))
    z6, _, _ = Encoder(6, (8, 16, 32, 64), rng())(T.zeros([2, 6, 16, 16]))
    assert z3.shape == z6.shape


def test_encoder_recurrent_states_and_divisibility():
    enc = Encoder(9, (4, 8, 16), rng(), recurrent_blocks=True)
    _, feats, states = enc(T.zeros([1, 9, 8, 8]))
    assert len(states) == 3
    assert [s[0].shape for s in states] == [f.shape for f in feats]
    with pytest.raises(ValueError):
        enc(T.zeros([1, 9, 6, 8]))
    with pytest.raises(ValueError):
        enc(T.zeros([1, 6, 8, 8]))


def test_decoder_modes_share_weight_shapes():
    ch = (8, 16, 32, 64)
    plain = Decoder(ch, rng()).parameters()
    skip = Decoder(ch, rng(), skips=True).parameters()
    assert {k: v.shape for k, v in skip.items() if not k.startswith("proj.")} == {k: v.shape for k, v in plain.items()}
    assert all(k in plain or k.startswith("proj.") for k in skip)


def test_decoder_output_size_and_zero_projection():
    ch = (8, 16, 32, 64)
    enc = Encoder(3, ch, rng(), dtype=np.float64)
    dec = Decoder(ch, rng(1), skips=True, dtype=np.float64)
    randomize(dec)
    x = randt((1, 3, 16, 16), 2)
    z, feats, _ = enc(x)
    r_hat, _ = dec(z, feats[:-1])
    assert r_hat.shape == x.shape
    for p in dec.proj:
        p.zero_()
    with_skips, _ = dec(z, feats[:-1])
    dec_plain = Decoder(ch, rng(), dtype=np.float64)
    for k, p in dec_plain.parameters().items():
        p.data[...] = dec.parameters()[k].data
    without, _ = dec_plain(z)
    np.testing.assert_array_equal(with_skips.data, without.data)


def test_decoder_feature_count_checked():
    dec = Decoder((8, 16, 32), rng(), skips=True)
    z = T.zeros([1, 32, 2, 2])
    with pytest.raises(ValueError):
        dec(z, [T.zeros([1, 8, 8, 8])])
    with pytest.raises(ValueError):
        Decoder((8, 16, 32), rng())(z, [T.zeros([1, 8, 8, 8]), T.zeros([1, 16, 4, 4])])


def test_gam_closure_degrades_continuously_to_skip_free():
    ch = (8, 16, 32)
    enc = Encoder(3, ch, rng(), dtype=np.float64)
    dec = Decoder(ch, rng(1), skips=True, dtype=np.float64)
    randomize(dec)
    gams = [MaskGam(c, rng(2), dtype=np.float64) for c in ch[:-1]]
    z, feats, _ = enc(randt((1, 3, 8, 8), 3))
    dec_plain = Decoder(ch, rng(), dtype=np.float64)
    for k, p in dec_plain.parameters().items():
        p.data[...] = dec.parameters()[k].data
    # with zero projection biases a closed gate injects nothing
    for p in dec.proj:
        p.b.data[...] = 0
    target, _ = dec_plain(z)
    gaps = []
    for bias in (0.0, -10.0, -100.0, -1000.0):
        for g in gams:
            g.att.b.data[...] = bias
        out, _ = dec(z, feats[:-1], gams)
        gaps.append(np.abs(out.data - target.data).max())
    assert gaps[2] < gaps[0] and gaps[3] < 1e-12
