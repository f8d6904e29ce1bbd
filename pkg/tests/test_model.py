"""Architecture tests: config rules, initialization, forward pieces, loss,
and the checkpoint format."""

import json
import math
import os

import numpy as np
import pytest

from statt.autograd import Tensor
from statt.checkpoint import load_checkpoint, save_checkpoint
from statt.errors import ConfigError, ContractError, DataFormatError, ShapeError
from statt.model import (
    IGNORE_LABEL,
    ModelConfig,
    ModelParams,
    aggregate,
    aggregate_skips,
    attention_weights,
    bilstm_forward,
    cross_entropy_loss,
    decoder_forward,
    default_model_config,
    encoder_forward,
    forward_batch,
    gradcheck_model_config,
    init_params,
    lstm_cell,
    lstm_weights,
    model_config_from_dict,
    model_config_to_dict,
    param_count,
    statt_forward,
    with_mode,
)

import oracles


def _set(params: ModelParams, **tensors) -> None:
    vals = params.copy_values()
    vals.update(tensors)
    params.set_values(vals)


def _zero_prefixes(params: ModelParams, *prefixes: str) -> None:
    vals = params.copy_values()
    for name in vals:
        if any(name.startswith(p) for p in prefixes):
            vals[name] = np.zeros_like(vals[name])
    params.set_values(vals)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_validation():
    good = dict(time_steps=4, in_channels=2, num_classes=3, in_size=16,
                out_size=8, blocks=2, base_channels=4, lstm_hidden=8,
                attn_hidden=8, mode="attention")
    ModelConfig(**good)
    bad_cases = [
        dict(time_steps=1),
        dict(in_channels=0),
        dict(num_classes=1),
        dict(blocks=0),
        dict(base_channels=0),
        dict(lstm_hidden=0),
        dict(attn_hidden=-1),
        dict(in_size=18),            # not divisible by 2**blocks
        dict(out_size=0),
        dict(out_size=17),           # above in_size
        dict(out_size=7),            # odd margin, crop not centered
        dict(mode="median"),
    ]
    for override in bad_cases:
        with pytest.raises(ConfigError):
            ModelConfig(**{**good, **override})


def test_config_derived_sizes():
    cfg = gradcheck_model_config()
    assert cfg.bottleneck_channels == 8
    assert cfg.bottleneck_size == 4
    assert [cfg.block_channels(k) for k in range(cfg.blocks)] == [4, 8]
    big = default_model_config()
    assert big.bottleneck_channels == big.base_channels * 2 ** (big.blocks - 1)
    assert big.bottleneck_size * 2 ** big.blocks == big.in_size


def test_config_dict_round_trip():
    cfg = default_model_config(time_steps=6, in_channels=3, num_classes=5)
    d = model_config_to_dict(cfg)
    assert model_config_from_dict(d) == cfg
    with pytest.raises(ConfigError):
        model_config_from_dict({**d, "bogus": 1})
    missing = dict(d)
    del missing["time_steps"]
    with pytest.raises(ConfigError):
        model_config_from_dict(missing)


def test_with_mode():
    cfg = gradcheck_model_config()
    assert with_mode(cfg, None) is cfg
    assert with_mode(cfg, "attention") is cfg
    swapped = with_mode(cfg, "mean")
    assert swapped.mode == "mean"
    assert with_mode(swapped, "attention") == cfg
    with pytest.raises(ConfigError):
        with_mode(cfg, "median")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def test_param_count_matches_hand_arithmetic():
    # Tiny config, tallied independently by hand:
    #   encoder 1104 + lstm 2*544 + attention 145 + bottleneck proj 136
    #   + decoder levels 2000 + 568 + classifier 15 = 5056
    cfg = gradcheck_model_config()
    assert param_count(cfg) == 5056
    params = init_params(cfg, seed=0)
    assert params.param_count() == 5056
    assert len(params) == 50


def test_param_shapes_follow_channel_doubling():
    cfg = ModelConfig(time_steps=4, in_channels=10, num_classes=3, in_size=32,
                      out_size=16, blocks=3, base_channels=32, lstm_hidden=8,
                      attn_hidden=8)
    params = init_params(cfg, seed=0)
    assert params["encoder.block0.conv1.weight"].shape == (32, 10, 3, 3)
    assert params["encoder.block0.conv2.weight"].shape == (32, 32, 3, 3)
    assert params["encoder.block1.conv1.weight"].shape == (64, 32, 3, 3)
    assert params["encoder.block2.conv1.weight"].shape == (128, 64, 3, 3)
    u, cb = cfg.lstm_hidden, cfg.bottleneck_channels
    assert params["lstm_fw.forget.weight_h"].shape == (u, u)
    assert params["lstm_fw.forget.weight_x"].shape == (u, cb)
    assert params["attention.fc1.weight"].shape == (cfg.attn_hidden, 2 * u)
    assert params["attention.fc2.weight"].shape == (1, cfg.attn_hidden)
    assert params["decoder.bottleneck_proj.weight"].shape == (cb, 2 * u, 1, 1)
    assert params["classifier.weight"].shape == (cfg.num_classes, 32, 1, 1)


def test_init_determinism_and_distribution():
    cfg = gradcheck_model_config()
    a = init_params(cfg, seed=7)
    b = init_params(cfg, seed=7)
    c = init_params(cfg, seed=8)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[name].data, c[name].data) for name in a)

    from statt.model import _param_shapes
    for name, shape, init in _param_shapes(cfg):
        values = a[name].data
        assert values.shape == shape
        if init[0] == "glorot":
            bound = math.sqrt(6.0 / (init[1] + init[2]))
            assert np.all(np.abs(values) <= bound)
            assert values.std() > 0
        elif init[0] == "ones":
            assert name.endswith(".bias") and ".forget." in name
            assert np.all(values == 1.0)
        else:
            assert np.all(values == 0.0)


def test_lstm_weights_accessor():
    cfg = gradcheck_model_config()
    params = init_params(cfg, seed=0)
    fw = lstm_weights(params, "fw")
    assert fw.forget.w_h is params["lstm_fw.forget.weight_h"]
    assert fw.cell.b is params["lstm_fw.cell.bias"]
    with pytest.raises(ContractError):
        lstm_weights(params, "sideways")


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_shapes_and_skips(tiny_model_config):
    cfg = tiny_model_config
    params = init_params(cfg, seed=1)
    x = np.random.default_rng(0).normal(size=(cfg.in_channels, 16, 16))
    z, skips = encoder_forward(x.astype(np.float32), params, cfg)
    assert z.shape == (8, 4, 4)
    assert [s.shape for s in skips] == [(4, 16, 16), (8, 8, 8)]
    xb = np.random.default_rng(1).normal(size=(3, cfg.in_channels, 16, 16))
    zb, skipsb = encoder_forward(xb.astype(np.float32), params, cfg)
    assert zb.shape == (3, 8, 4, 4)
    assert [s.shape for s in skipsb] == [(3, 4, 16, 16), (3, 8, 8, 8)]


def test_encoder_zero_input_stays_zero(tiny_model_config):
    # Freshly initialized biases are zero, so zero input propagates.
    params = init_params(tiny_model_config, seed=2)
    x = np.zeros((tiny_model_config.in_channels, 16, 16), dtype=np.float32)
    z, skips = encoder_forward(x, params, tiny_model_config)
    assert np.all(z.data == 0)
    assert all(np.all(s.data == 0) for s in skips)


# ---------------------------------------------------------------------------
# recurrence
# ---------------------------------------------------------------------------

def _zero_gates(u, f):
    zeros = lambda *s: Tensor(np.zeros(s))
    from statt.model import GateWeights, LstmWeights
    g = lambda: GateWeights(zeros(u, u), zeros(u, f), zeros(u))
    return LstmWeights(g(), g(), g(), g())


def test_lstm_cell_closed_forms():
    u, f, n = 5, 3, 4
    weights = _zero_gates(u, f)
    h0 = Tensor(np.zeros((n, u)))
    c0 = Tensor(np.zeros((n, u)))
    x = Tensor(np.random.default_rng(0).normal(size=(n, f)))
    h, c = lstm_cell(h0, c0, x, weights)
    assert np.all(h.data == 0) and np.all(c.data == 0)

    cv = np.random.default_rng(1).normal(size=(n, u))
    h, c = lstm_cell(h0, Tensor(cv), x, weights)
    assert np.allclose(c.data, 0.5 * cv, atol=1e-12)
    assert np.allclose(h.data, 0.5 * np.tanh(0.5 * cv), atol=1e-12)


def test_lstm_cell_matches_oracle(rng):
    u, f, n = 6, 4, 5
    for _ in range(3):
        gates = {
            name: (rng.normal(size=(u, u)), rng.normal(size=(u, f)),
                   rng.normal(size=(u,)))
            for name in ("forget", "input", "output", "cell")
        }
        from statt.model import GateWeights, LstmWeights
        weights = LstmWeights(*[
            GateWeights(Tensor(gates[n_][0]), Tensor(gates[n_][1]),
                        Tensor(gates[n_][2]))
            for n_ in ("forget", "input", "output", "cell")
        ])
        h_prev = rng.normal(size=(n, u))
        c_prev = rng.normal(size=(n, u))
        x = rng.normal(size=(n, f))
        h, c = lstm_cell(Tensor(h_prev), Tensor(c_prev), Tensor(x), weights)
        h_ref, c_ref = oracles.lstm_cell_oracle(h_prev, c_prev, x, gates)
        assert np.allclose(h.data, h_ref, atol=1e-12)
        assert np.allclose(c.data, c_ref, atol=1e-12)


def test_bilstm_rejects_short_sequences(tiny_model_config):
    params = init_params(tiny_model_config, seed=0)
    z = np.zeros((8, 4, 4), dtype=np.float32)
    with pytest.raises(ContractError):
        bilstm_forward([z], params, tiny_model_config)


def test_bilstm_zeroed_weights_give_zero_states(tiny_model_config):
    params = init_params(tiny_model_config, seed=0)
    _zero_prefixes(params, "lstm_fw.", "lstm_bw.")
    rng = np.random.default_rng(3)
    z_seq = [rng.normal(size=(8, 4, 4)).astype(np.float32) for _ in range(4)]
    h_seq = bilstm_forward(z_seq, params, tiny_model_config)
    assert len(h_seq) == 4
    for h in h_seq:
        assert h.shape == (16, 4, 4)
        assert np.all(h.data == 0)


def test_bilstm_time_reversal_swaps_direction_halves(tiny_model_config):
    # With the backward weights tied to the forward ones, reversing the
    # input time order reverses the outputs and swaps their halves.
    cfg = tiny_model_config
    params = init_params(cfg, seed=4, dtype=np.float64)
    vals = params.copy_values()
    for gate in ("forget", "input", "output", "cell"):
        for part in ("weight_h", "weight_x", "bias"):
            vals[f"lstm_bw.{gate}.{part}"] = vals[f"lstm_fw.{gate}.{part}"]
    params.set_values(vals)

    rng = np.random.default_rng(5)
    z_seq = [rng.normal(size=(8, 4, 4)) for _ in range(4)]
    fwd = [h.data for h in bilstm_forward(z_seq, params, cfg)]
    rev = [h.data for h in bilstm_forward(z_seq[::-1], params, cfg)]
    u = cfg.lstm_hidden
    for t in range(4):
        swapped = np.concatenate([fwd[3 - t][u:], fwd[3 - t][:u]])
        assert np.array_equal(rev[t], swapped)


# ---------------------------------------------------------------------------
# attention and aggregation
# ---------------------------------------------------------------------------

def test_attention_uniform_for_identical_steps(tiny_model_config):
    params = init_params(tiny_model_config, seed=6)
    h = np.random.default_rng(6).normal(size=(16, 4, 4)).astype(np.float32)
    alpha = attention_weights([h, h, h, h], params)
    assert alpha.shape == (4,)
    assert np.all(alpha.data == 0.25)


def test_attention_saturates_to_one_hot(tiny_model_config):
    cfg = tiny_model_config
    params = init_params(cfg, seed=7)
    _zero_prefixes(params, "attention.")
    fc1 = np.zeros((cfg.attn_hidden, 2 * cfg.lstm_hidden), dtype=np.float32)
    fc1[0, 0] = 5.0
    fc2 = np.zeros((1, cfg.attn_hidden), dtype=np.float32)
    fc2[0, 0] = 100.0
    _set(params, **{"attention.fc1.weight": fc1, "attention.fc2.weight": fc2})

    t_star = 2
    h_seq = []
    for t in range(4):
        h = np.zeros((16, 4, 4), dtype=np.float32)
        h[0] = 1.0 if t == t_star else -1.0
        h_seq.append(h)
    alpha = attention_weights(h_seq, params)
    assert alpha.data[t_star] > 1 - 1e-6
    assert np.all(np.delete(alpha.data, t_star) < 1e-6)


def test_attention_matches_oracle(tiny_model_config, rng):
    cfg = tiny_model_config
    for _ in range(2):
        params = init_params(cfg, seed=int(rng.integers(1000)),
                             dtype=np.float64)
        h_seq = [rng.normal(size=(2, 16, 4, 4)) for _ in range(4)]
        alpha = attention_weights(h_seq, params)
        ref = oracles.attention_weights_oracle(
            h_seq,
            params["attention.fc1.weight"].data,
            params["attention.fc1.bias"].data,
            params["attention.fc2.weight"].data,
            params["attention.fc2.bias"].data,
        )
        assert alpha.shape == (4, 2)
        assert np.allclose(alpha.data, ref, atol=1e-9)
        assert np.allclose(alpha.data.sum(axis=0), 1.0, atol=1e-6)


def test_aggregate_one_hot_recovers_slice_exactly(rng):
    maps = [rng.normal(size=(6, 3, 3)).astype(np.float32) for _ in range(5)]
    alpha = np.zeros(5, dtype=np.float32)
    alpha[3] = 1.0
    out = aggregate(maps, Tensor(alpha))
    assert np.array_equal(out.data, maps[3])


def test_aggregate_uniform_equals_temporal_mean(rng):
    maps = [rng.normal(size=(6, 3, 3)) for _ in range(4)]
    out = aggregate(maps, Tensor(np.full(4, 0.25)))
    assert np.allclose(out.data, np.mean(maps, axis=0), atol=1e-12)


def test_aggregate_matches_oracle_and_validates(rng):
    maps = [rng.normal(size=(2, 6, 3, 3)) for _ in range(4)]
    alpha = oracles.softmax_oracle(rng.normal(size=(4, 2)), axis=0)
    out = aggregate(maps, Tensor(alpha))
    ref = oracles.aggregate_oracle(np.stack(maps), alpha)
    assert np.allclose(out.data, ref, atol=1e-12)

    with pytest.raises(ShapeError):
        aggregate(maps, Tensor(alpha[:3]))
    with pytest.raises(ContractError):
        aggregate(maps, Tensor(np.full((4, 2), 0.3)))


def test_aggregate_skips_one_hot_and_oracle(rng):
    skips = [[rng.normal(size=(4, 8, 8)), rng.normal(size=(8, 4, 4))]
             for _ in range(3)]
    one_hot = np.array([0.0, 1.0, 0.0])
    outs = aggregate_skips(skips, Tensor(one_hot))
    assert np.array_equal(outs[0].data, skips[1][0])
    assert np.array_equal(outs[1].data, skips[1][1])

    alpha = oracles.softmax_oracle(rng.normal(size=3), axis=0)
    outs = aggregate_skips(skips, Tensor(alpha))
    refs = oracles.aggregate_skips_oracle(skips, alpha)
    for got, ref in zip(outs, refs):
        assert np.allclose(got.data, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# decoder and whole-model forward
# ---------------------------------------------------------------------------

def test_decoder_zero_params_give_uniform_probs(tiny_model_config):
    cfg = tiny_model_config
    params = init_params(cfg, seed=8)
    _zero_prefixes(params, "")  # every tensor
    x = np.random.default_rng(8).normal(
        size=(cfg.time_steps, cfg.in_channels, 16, 16)).astype(np.float32)
    trace = statt_forward(x, params, cfg)
    assert np.all(trace.logits == 0)
    assert np.allclose(trace.probs, 1.0 / cfg.num_classes, atol=1e-7)


def test_decoder_rejects_wrong_skip_count(tiny_model_config):
    cfg = tiny_model_config
    params = init_params(cfg, seed=9)
    c = Tensor(np.zeros((2 * cfg.lstm_hidden, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        decoder_forward(c, [Tensor(np.zeros((4, 16, 16), dtype=np.float32))],
                        params, cfg)


def test_forward_trace_shapes_and_simplex(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=10)
    x = rng.normal(size=(cfg.time_steps, cfg.in_channels, 16, 16))
    trace = statt_forward(x.astype(np.float32), params, cfg)
    assert trace.alpha.shape == (4,)
    assert abs(trace.alpha.sum() - 1.0) <= 1e-6
    assert np.all(trace.alpha > 0)
    assert trace.hidden.shape == (4, 16, 4, 4)
    assert [s.shape for s in trace.skips] == [(4, 4, 16, 16), (4, 8, 8, 8)]
    assert trace.aggregated.shape == (16, 4, 4)
    assert trace.logits.shape == (3, 8, 8)
    assert trace.probs.shape == (3, 8, 8)
    assert np.allclose(trace.probs.sum(axis=0), 1.0, atol=1e-6)


def test_forward_batch_matches_single_patch(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=11, dtype=np.float64)
    x = rng.normal(size=(3, cfg.time_steps, cfg.in_channels, 16, 16))
    parts = forward_batch(Tensor(x), params, cfg)
    for i in range(3):
        trace = statt_forward(x[i], params, cfg)
        assert np.allclose(parts.alpha.data[:, i], trace.alpha, atol=1e-10)
        assert np.allclose(parts.probs.data[i], trace.probs, atol=1e-10)


def test_forward_batch_upto_alpha_stops_early(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=12)
    x = rng.normal(size=(2, cfg.time_steps, cfg.in_channels, 16, 16))
    x = x.astype(np.float32)
    head = forward_batch(Tensor(x), params, cfg, upto="alpha")
    assert head.logits is None and head.probs is None
    assert head.aggregated is None and head.skip_aggregates is None
    full = forward_batch(Tensor(x), params, cfg)
    assert np.array_equal(head.alpha.data, full.alpha.data)


def test_forward_batch_mean_mode_uses_uniform_weights(tiny_model_config, rng):
    cfg = with_mode(tiny_model_config, "mean")
    params = init_params(cfg, seed=13)
    x = rng.normal(size=(2, cfg.time_steps, cfg.in_channels, 16, 16))
    parts = forward_batch(Tensor(x.astype(np.float32)), params, cfg)
    assert np.all(parts.alpha.data == 1.0 / cfg.time_steps)


def test_forward_batch_input_validation(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=14)
    good = rng.normal(size=(1, 4, 2, 16, 16)).astype(np.float32)
    forward_batch(Tensor(good), params, cfg)
    with pytest.raises(ShapeError):
        forward_batch(Tensor(good[0]), params, cfg)
    with pytest.raises(ShapeError):
        forward_batch(Tensor(good[:, :3]), params, cfg)
    with pytest.raises(ShapeError):
        forward_batch(Tensor(good[:, :, :1]), params, cfg)
    with pytest.raises(ShapeError):
        forward_batch(Tensor(good.astype(np.float64)), params, cfg)


def test_zeroed_scorer_output_matches_mean_mode(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=15, dtype=np.float64)
    _zero_prefixes(params, "attention.fc2.")
    x = rng.normal(size=(2, cfg.time_steps, cfg.in_channels, 16, 16))
    att = forward_batch(Tensor(x), params, cfg)
    mean = forward_batch(Tensor(x), params, with_mode(cfg, "mean"))
    assert np.allclose(att.alpha.data, 1.0 / cfg.time_steps, atol=1e-12)
    assert np.max(np.abs(att.probs.data - mean.probs.data)) <= 1e-6


def test_alpha_permutes_with_steps_when_lstm_is_zeroed(tiny_model_config, rng):
    cfg = tiny_model_config
    params = init_params(cfg, seed=16)
    _zero_prefixes(params, "lstm_fw.", "lstm_bw.")
    x = rng.normal(size=(1, 4, 2, 16, 16)).astype(np.float32)
    perm = [2, 0, 3, 1]
    a = forward_batch(Tensor(x), params, cfg, upto="alpha").alpha.data
    b = forward_batch(Tensor(x[:, perm]), params, cfg, upto="alpha").alpha.data
    assert np.array_equal(b, a[perm])
    assert np.allclose(a, 0.25, atol=1e-12)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_cross_entropy_closed_forms():
    probs = np.zeros((1, 4, 2, 2))
    labels = np.array([[[0, 1], [2, 3]]])
    bi, hi, wi = np.nonzero(np.ones((1, 2, 2), dtype=bool))
    perfect = probs.copy()
    perfect[bi, labels[bi, hi, wi], hi, wi] = 1.0
    assert cross_entropy_loss(Tensor(perfect), labels).item() == 0.0

    uniform = np.full((1, 4, 2, 2), 0.25)
    loss = cross_entropy_loss(Tensor(uniform), labels).item()
    assert abs(loss - math.log(4)) <= 1e-12


def test_cross_entropy_ignores_sentinel_pixels(rng):
    probs = oracles.softmax_oracle(rng.normal(size=(2, 3, 4, 4)), axis=1)
    labels = rng.integers(0, 3, size=(2, 4, 4))
    masked = labels.copy()
    masked[0, :2] = IGNORE_LABEL

    got = cross_entropy_loss(Tensor(probs), masked).item()
    ref = oracles.cross_entropy_oracle(probs, masked)
    assert abs(got - ref) <= 1e-12

    # Ignored pixels change nothing even when their probabilities do.
    perturbed = probs.copy()
    perturbed[0, :, :2] = 1e-12
    assert cross_entropy_loss(Tensor(perturbed), masked).item() == got


def test_cross_entropy_error_paths(rng):
    probs = oracles.softmax_oracle(rng.normal(size=(1, 3, 2, 2)), axis=1)
    with pytest.raises(ContractError):
        cross_entropy_loss(Tensor(probs),
                           np.full((1, 2, 2), IGNORE_LABEL, dtype=np.int64))
    with pytest.raises(ContractError):
        cross_entropy_loss(Tensor(probs), np.full((1, 2, 2), 3, dtype=np.int64))
    with pytest.raises(ShapeError):
        cross_entropy_loss(Tensor(probs), np.zeros((1, 3, 3), dtype=np.int64))
    with pytest.raises(ShapeError):
        cross_entropy_loss(Tensor(probs[0, :, 0]), np.zeros((2,), dtype=np.int64))


def test_cross_entropy_matches_oracle(rng):
    for _ in range(3):
        probs = oracles.softmax_oracle(rng.normal(size=(2, 4, 3, 3)), axis=1)
        labels = rng.integers(0, 4, size=(2, 3, 3))
        labels[rng.random(size=labels.shape) < 0.2] = IGNORE_LABEL
        if np.all(labels == IGNORE_LABEL):
            labels[0, 0, 0] = 1
        got = cross_entropy_loss(Tensor(probs), labels).item()
        ref = oracles.cross_entropy_oracle(probs, labels)
        assert abs(got - ref) <= 1e-9


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tiny_model_config, tmp_path):
    cfg = tiny_model_config
    params = init_params(cfg, seed=17)
    path = str(tmp_path / "ckpt")
    save_checkpoint(path, params, cfg)
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name].data, params[name].data)

    # Saving the loaded copy reproduces the files byte for byte.
    path2 = str(tmp_path / "ckpt2")
    save_checkpoint(path2, loaded, loaded_cfg)
    for fname in ("params.json", "params.bin"):
        a = (tmp_path / "ckpt" / fname).read_bytes()
        b = (tmp_path / "ckpt2" / fname).read_bytes()
        assert a == b


def test_checkpoint_stores_float32(tiny_model_config, tmp_path):
    cfg = tiny_model_config
    params = init_params(cfg, seed=18, dtype=np.float64)
    path = str(tmp_path / "ckpt")
    save_checkpoint(path, params, cfg)
    loaded, _ = load_checkpoint(path)
    for name in params:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name].data,
                              params[name].data.astype(np.float32))


def test_checkpoint_rejects_tampered_files(tiny_model_config, tmp_path):
    cfg = tiny_model_config
    params = init_params(cfg, seed=19)

    def fresh(name):
        path = tmp_path / name
        save_checkpoint(str(path), params, cfg)
        return path

    p = fresh("missing_json")
    os.remove(p / "params.json")
    with pytest.raises(DataFormatError, match="params.json"):
        load_checkpoint(str(p))

    p = fresh("missing_bin")
    os.remove(p / "params.bin")
    with pytest.raises(DataFormatError, match="params.bin"):
        load_checkpoint(str(p))

    p = fresh("bad_json")
    (p / "params.json").write_text("{not json")
    with pytest.raises(DataFormatError, match="unparseable"):
        load_checkpoint(str(p))

    p = fresh("bad_version")
    m = json.loads((p / "params.json").read_text())
    m["format_version"] = 99
    (p / "params.json").write_text(json.dumps(m))
    with pytest.raises(DataFormatError, match="format_version"):
        load_checkpoint(str(p))

    p = fresh("bad_shape")
    m = json.loads((p / "params.json").read_text())
    m["tensors"][0]["shape"] = [1, 1, 1, 1]
    (p / "params.json").write_text(json.dumps(m))
    with pytest.raises(DataFormatError, match="shape"):
        load_checkpoint(str(p))

    p = fresh("renamed_tensor")
    m = json.loads((p / "params.json").read_text())
    m["tensors"][0]["name"] = "encoder.block9.conv1.weight"
    (p / "params.json").write_text(json.dumps(m))
    with pytest.raises(DataFormatError, match="unknown tensor"):
        load_checkpoint(str(p))

    p = fresh("truncated_bin")
    raw = (p / "params.bin").read_bytes()
    (p / "params.bin").write_bytes(raw[:-8])
    with pytest.raises(DataFormatError, match="truncated|size"):
        load_checkpoint(str(p))

    p = fresh("padded_bin")
    raw = (p / "params.bin").read_bytes()
    (p / "params.bin").write_bytes(raw + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="size"):
        load_checkpoint(str(p))

    p = fresh("bad_offset")
    m = json.loads((p / "params.json").read_text())
    m["tensors"][1]["offset"] += 4
    (p / "params.json").write_text(json.dumps(m))
    with pytest.raises(DataFormatError, match="offset"):
        load_checkpoint(str(p))


def test_set_values_validates_shapes(tiny_model_config):
    params = init_params(tiny_model_config, seed=20)
    vals = params.copy_values()
    vals["classifier.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(ShapeError, match="classifier.bias"):
        params.set_values(vals)
