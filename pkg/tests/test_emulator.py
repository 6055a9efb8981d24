import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiforge.dataset import WindowSet, make_windows
from epiforge.emulator import (
    ACTIVATION, CONV, POINTWISE, ArchConfig, EmulatorNet, LayerSpec, ShapeError, TrainingDiverged, TrainSchedule,
    WeightsFormatError, backward, causal_dilated_conv, evaluate, forward, load_weights, loss_mse, persistence_mse,
    receptive_field, rollout, rollout_batch, save_weights, train, weights_bytes, weights_from_bytes,
)
from epiforge.heatmap import CHANNELS, HeatmapSequence, ParamTrack


def naive_conv(x, W, b, d):
    """Direct summation over taps and spatial offsets, zero padded."""
    T, C, h, w = x.shape
    kt, k, _, cin, cout = W.shape
    p = k // 2
    out = np.zeros((T, cout, h, w))
    for t in range(T):
        for j in range(kt):
            src = t - (kt - 1 - j) * d
            if src < 0:
                continue
            for dy in range(k):
                for dx in range(k):
                    for r in range(h):
                        for c in range(w):
                            rr, cc = r + dy - p, c + dx - p
                            if 0 <= rr < h and 0 <= cc < w:
                                out[t, :, r, c] += x[src, :, rr, cc] @ W[j, dy, dx]
    return out + b[None, :, None, None]


def small_net(seed=0, dtype=np.float64, residual=True, features=4, dilations=(1, 2), n_data=3, n_params=3):
    arch = ArchConfig(lookback=5, n_data=n_data, n_params=n_params, features=features, dilations=dilations,
                      residual=residual)
    net = EmulatorNet.build(arch, channel_names=CHANNELS[:n_data], seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for b in net.biases:
        if b is not None:
            b[:] = rng.normal(0, 0.1, b.shape)
    return net


def random_window(rng, net, h=4, w=4):
    return rng.random((net.lookback, net.n_data + net.n_params, h, w))


# --- architecture -------------------------------------------------------------------------


def test_default_architecture():
    specs = ArchConfig().layers()
    convs = [s for s in specs if s.kind == CONV]
    assert [s.dilation for s in convs] == [1, 2, 4]
    assert all(s.temporal_kernel == 2 and s.spatial_kernel == 3 for s in convs)
    assert convs[0].in_channels == 6 and convs[-1].out_channels == 32
    assert specs[-1].kind == POINTWISE and specs[-1].out_channels == 3
    assert receptive_field(specs) == 8


def test_receptive_field_is_capped_by_the_window():
    net = EmulatorNet.build(ArchConfig(features=4))
    assert net.receptive_field == net.lookback == 5


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(CONV, 1, 1, dilation=0)
    with pytest.raises(ValueError):
        LayerSpec(CONV, 1, 1, spatial_kernel=2)
    with pytest.raises(ValueError):
        LayerSpec(POINTWISE, 1, 1, temporal_kernel=2)
    with pytest.raises(ValueError):
        LayerSpec("recurrent", 1, 1)


def test_layout_must_match_first_layer():
    net = small_net()
    with pytest.raises(ShapeError):
        EmulatorNet(net.specs, net.weights, net.biases, net.lookback, 3, 4, CHANNELS, net.scale, net.active,
                    net.cumulative)


# --- causal dilated convolution -----------------------------------------------------------


def test_kernel_one_is_a_per_frame_spatial_conv():
    rng = np.random.default_rng(0)
    x = rng.random((4, 2, 5, 5))
    W = rng.random((1, 3, 3, 2, 3))
    out = causal_dilated_conv(x, W, dilation=1)
    for t in range(4):
        assert np.allclose(out[t], naive_conv(x[t:t + 1], W, np.zeros(3), 1)[0])


def test_impulse_response_of_dilation_two():
    x = np.zeros((10, 1, 1, 1))
    x[4] = 1.0
    out = causal_dilated_conv(x, np.ones((2, 1, 1, 1, 1)), dilation=2)
    assert np.flatnonzero(out.ravel()).tolist() == [4, 6]


def test_hand_computed_two_frame_example():
    # frames [[1,2],[3,4]] and [[5,6],[7,8]]; weight 0.5 on the previous day, 2 on the current day, bias 1
    x = np.array([[[[1, 2], [3, 4]]], [[[5, 6], [7, 8]]]], dtype=np.float64)
    W = np.array([0.5, 2.0]).reshape(2, 1, 1, 1, 1)
    out = causal_dilated_conv(x, W, np.array([1.0]), dilation=1)
    assert np.array_equal(out[0, 0], [[3, 5], [7, 9]])
    assert np.array_equal(out[1, 0], [[11.5, 14], [16.5, 19]])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 3), kt=st.integers(1, 3), k=st.sampled_from([1, 3]))
def test_conv_matches_direct_summation(seed, d, kt, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 2, 3, 4))
    W = rng.normal(size=(kt, k, k, 2, 3))
    b = rng.normal(size=3)
    assert np.allclose(causal_dilated_conv(x, W, b, d), naive_conv(x, W, b, d))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 4), t=st.integers(0, 6))
def test_future_perturbation_leaves_past_outputs_unchanged(seed, d, t):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 2, 3, 3))
    W = rng.normal(size=(2, 3, 3, 2, 2))
    y = x.copy()
    y[t + 1:] += rng.normal(size=y[t + 1:].shape)
    a = causal_dilated_conv(x, W, dilation=d)
    b = causal_dilated_conv(y, W, dilation=d)
    assert np.array_equal(a[: t + 1], b[: t + 1])


# --- forward ------------------------------------------------------------------------------


def test_zero_weights_give_zero_output():
    net = small_net(residual=False)
    for p in net.parameters():
        p[...] = 0
    out = forward(net, random_window(np.random.default_rng(0), net))
    assert out.shape == (1, 3, 4, 4) and not out.any()


def test_window_without_cases_predicts_nothing():
    net = small_net(seed=2)
    window = random_window(np.random.default_rng(4), net)
    window[:, :3] = 0
    assert not forward(net, window).any()
    window[0, 1, 2, 3] = 1e-6
    assert forward(net, window).any()


def test_empty_rows_contribute_no_gradient():
    net = small_net(seed=6)
    rng = np.random.default_rng(6)
    x = rng.random((2, 5, 3, 3, 6))
    x[1, ..., :3] = 0
    y = rng.random((2, 3, 3, 3))
    _, both = net.loss_and_grads(x, y)
    _, live = net.loss_and_grads(x[:1], y[:1])
    for g_both, g_live in zip(both, live):
        # the batch mean halves the live row's share
        assert np.allclose(g_both, g_live / 2, rtol=1e-12, atol=1e-14)


def test_identity_pointwise_net_copies_last_frame():
    spec = LayerSpec(POINTWISE, 6, 3)
    W = np.zeros(spec.weight_shape)
    W[0, 0, 0, :3, :3] = np.eye(3)
    net = EmulatorNet([spec], [W], [np.zeros(3)], 5, 3, 3, CHANNELS, np.ones(3), np.ones(3, bool),
                      np.array([True, False, False]), residual=False)
    window = random_window(np.random.default_rng(1), net)
    assert np.array_equal(forward(net, window)[0], window[-1, :3])


def test_two_frame_net_matches_hand_arithmetic():
    spec = LayerSpec(CONV, 1, 1, temporal_kernel=2)
    net = EmulatorNet([spec], [np.array([0.5, 2.0]).reshape(spec.weight_shape)], [np.array([1.0])], 2, 1, 0,
                      ("cumulative_positive_tested",), np.ones(1), np.ones(1, bool), np.ones(1, bool), residual=False)
    window = np.array([[[[1, 2], [3, 4]]], [[[5, 6], [7, 8]]]], dtype=np.float64)
    assert np.array_equal(forward(net, window)[0, 0], [[11.5, 14], [16.5, 19]])


def test_forward_shape_errors_name_both_shapes():
    net = small_net()
    with pytest.raises(ShapeError, match=r"expected.*got"):
        forward(net, np.zeros((4, 6, 3, 3)))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((5, 6, 3)))


def test_forward_is_deterministic():
    net = small_net(dtype=np.float32)
    w = random_window(np.random.default_rng(2), net).astype(np.float32)
    assert np.array_equal(forward(net, w), forward(net, w))


def test_every_window_frame_can_influence_the_output():
    net = small_net(dilations=(1, 2, 4))
    rng = np.random.default_rng(3)
    w = random_window(rng, net)
    base = forward(net, w)
    for j in range(net.lookback):
        v = w.copy()
        v[j] += 1.0
        assert not np.array_equal(forward(net, v), base)


def test_spatial_translation_equivariance_away_from_borders():
    net = small_net(residual=False)
    rng = np.random.default_rng(4)
    w = random_window(rng, net, 14, 14)
    a = forward(net, w)[0]
    b = forward(net, np.roll(w, (1, 2), axis=(2, 3)))[0]
    m = 4  # two 3x3 convs reach two cells, plus the shift
    assert np.allclose(np.roll(a, (1, 2), axis=(1, 2))[:, m:-m, m:-m], b[:, m:-m, m:-m], atol=1e-12)


# --- loss and gradients -------------------------------------------------------------------


def test_loss_trivial_cases():
    t = np.random.default_rng(0).random((1, 3, 4, 4))
    assert loss_mse(t, t) == 0.0
    assert loss_mse(t + 1, t) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        loss_mse(t, t[:, :2])


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(1)
    a, b = rng.random((1, 3, 4, 5)), rng.random((1, 3, 4, 5))
    total = 0.0
    for v, u in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (v - u) ** 2
    assert loss_mse(a, b) == pytest.approx(total / a.size, rel=1e-12)


def test_perfect_prediction_has_zero_gradients():
    net = small_net()
    w = random_window(np.random.default_rng(5), net)
    grads = backward(net, w, forward(net, w))
    assert all(not g.any() for g in grads)


def test_scaling_the_loss_scales_the_gradients():
    net = small_net()
    rng = np.random.default_rng(6)
    x = rng.random((3, 5, 4, 4, 6))
    y = rng.random((3, 4, 4, 3))
    l1, g1 = net.loss_and_grads(x, y)
    l2, g2 = net.loss_and_grads(x, y, loss_scale=2.0)
    assert l2 == pytest.approx(2 * l1)
    assert all(np.allclose(b, 2 * a, rtol=1e-12, atol=0) for a, b in zip(g1, g2))


def _relu_masks(net, x):
    _, cache = net.forward_batch(x, keep=True)
    return [c for c, s in zip(cache, net.specs) if s.kind == ACTIVATION]


def test_gradients_match_central_differences():
    eps = 1e-3
    net = small_net(seed=3)
    rng = np.random.default_rng(7)
    window = random_window(rng, net)
    target = rng.random((1, 3, 4, 4))
    x = np.moveaxis(window, 1, -1)[None]
    grads = backward(net, window, target)
    params = net.parameters()
    sizes = np.array([p.size for p in params])
    base_masks = _relu_masks(net, x)
    checked = 0
    errors = []
    while checked < 200:
        flat = int(rng.integers(sizes.sum()))
        k = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        idx = np.unravel_index(flat - int(sizes[:k].sum()), params[k].shape)
        orig = params[k][idx]
        vals, same = [], True
        for step in (eps, -eps):
            params[k][idx] = orig + step
            same &= all(np.array_equal(a, b) for a, b in zip(_relu_masks(net, x), base_masks))
            vals.append(loss_mse(forward(net, window), target))
        params[k][idx] = orig
        if not same:
            # the difference quotient straddles a ReLU kink; it says nothing about the derivative
            continue
        numeric = (vals[0] - vals[1]) / (2 * eps)
        analytic = grads[k][idx]
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
        checked += 1
    assert max(errors) <= 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_batched_gradient_is_mean_of_single_window_gradients(seed):
    net = small_net(seed=seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.random((4, 5, 3, 3, 6))
    y = rng.random((4, 3, 3, 3))
    _, batch = net.loss_and_grads(x, y)
    singles = [net.loss_and_grads(x[i:i + 1], y[i:i + 1])[1] for i in range(4)]
    for k, g in enumerate(batch):
        assert np.allclose(g, np.mean([s[k] for s in singles], axis=0), rtol=1e-10, atol=1e-12)


# --- training -----------------------------------------------------------------------------


def _toy_windows(rng, n_seq, shuffle=False, h=3, w=3):
    """Sequences whose next frame is the last frame grown by a factor set by the R0 plane."""
    sets = []
    for _ in range(n_seq):
        r0 = rng.uniform(1, 3)
        v = np.empty((12, 3, h, w), np.float32)
        v[0] = rng.uniform(0.5, 1.5, (3, h, w))
        for t in range(1, 12):
            v[t] = v[t - 1] * (1 + 0.05 * r0)
        sets.append(make_windows(HeatmapSequence(v), ParamTrack.constant(r0, 12), 5))
    ws = WindowSet.concat(sets)
    if shuffle:
        ws = WindowSet(ws.predictors, ws.targets[rng.permutation(len(ws))], ws.target_days, ws.n_data)
    return ws


def test_constant_sequences_are_learned():
    sets = []
    for c in (0.5, 1.0, 2.0):
        v = np.full((20, 3, 3, 3), c, np.float32)
        sets.append(make_windows(HeatmapSequence(v), ParamTrack.constant(2.0, 20), 5))
    ws = WindowSet.concat(sets)
    net = EmulatorNet.build(ArchConfig(features=8), channel_names=CHANNELS, seed=1)
    best, hist = train(net, ws, ws, TrainSchedule(max_epochs=50, batch_size=4, seed=1))
    assert evaluate(best, ws) < 1e-4
    assert len(hist.val_loss) <= 50


def test_shuffled_labels_cannot_match_genuine_labels():
    rng = np.random.default_rng(1)
    tr, va = _toy_windows(rng, 12), _toy_windows(rng, 4)
    shuffled = WindowSet(tr.predictors, tr.targets[rng.permutation(len(tr))], tr.target_days, tr.n_data)
    sch = TrainSchedule(max_epochs=40, batch_size=16, seed=2)
    genuine, _ = train(small_net(dtype=np.float32, features=8), tr, va, sch)
    control, _ = train(small_net(dtype=np.float32, features=8), shuffled, shuffled, sch)
    assert evaluate(control, va) > 5 * evaluate(genuine, va)


def test_best_validation_history_never_increases():
    rng = np.random.default_rng(2)
    tr, va = _toy_windows(rng, 6), _toy_windows(rng, 2)
    best, hist = train(small_net(dtype=np.float32), tr, va, TrainSchedule(max_epochs=15, batch_size=8))
    assert np.all(np.diff(hist.best_val) <= 0)
    assert evaluate(best, va) == pytest.approx(min(hist.best_val), rel=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostics():
    rng = np.random.default_rng(3)
    tr = _toy_windows(rng, 2)
    bad = WindowSet(tr.predictors, np.full_like(tr.targets, np.inf), tr.target_days, tr.n_data)
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train(small_net(dtype=np.float32), bad, tr, TrainSchedule(max_epochs=2))


def test_empty_splits_are_rejected():
    rng = np.random.default_rng(4)
    tr = _toy_windows(rng, 1)
    with pytest.raises(ValueError):
        train(small_net(), tr, tr.subset(slice(0, 0)))


def test_persistence_baseline_is_last_frame_error():
    rng = np.random.default_rng(5)
    ws = _toy_windows(rng, 2)
    last = ws.predictors[:, -1, :, :, :3].astype(np.float64)
    assert persistence_mse(ws) == pytest.approx(np.mean((last - ws.targets) ** 2))


# --- rollout ------------------------------------------------------------------------------


def test_rollout_of_lookback_length_returns_seeds():
    net = small_net(dtype=np.float32)
    seeds = np.random.default_rng(0).random((5, 3, 4, 4)).astype(np.float32) * 10
    out = rollout(net, seeds, ParamTrack.constant(2.0, 5), 5)
    assert np.array_equal(out.values, seeds)


def test_rollout_is_physical():
    net = small_net(dtype=np.float32, residual=False)
    rng = np.random.default_rng(1)
    seeds = np.cumsum(rng.random((5, 3, 4, 4)), axis=0).astype(np.float32)
    out = rollout(net, seeds, ParamTrack.constant(2.0, 30), 30).values
    assert out.shape == (30, 3, 4, 4)
    assert out.min() >= 0
    assert np.all(np.diff(out[:, 0], axis=0) >= 0)


def test_rollout_needs_a_long_enough_track():
    net = small_net(dtype=np.float32)
    with pytest.raises(ValueError):
        rollout(net, np.zeros((5, 3, 2, 2)), ParamTrack.constant(2.0, 10), 20)
    with pytest.raises(ShapeError):
        rollout(net, np.zeros((4, 3, 2, 2)), ParamTrack.constant(2.0, 20), 20)


def test_batched_rollout_rows_are_independent():
    net = small_net(dtype=np.float32)
    rng = np.random.default_rng(2)
    seeds = rng.random((3, 5, 3, 4, 4)).astype(np.float32)
    tracks = [ParamTrack.constant(r, 20) for r in (1.5, 2.0, 3.0)]
    batch = rollout_batch(net, seeds, tracks, 20)
    for i in range(3):
        assert np.array_equal(batch[i], rollout(net, seeds[i], tracks[i], 20).values)


def test_dropped_channel_is_predicted_as_zero():
    net = small_net(dtype=np.float32)
    net.active[1] = False
    seeds = np.ones((5, 3, 2, 2), np.float32)
    out = rollout(net, seeds, ParamTrack.constant(2.0, 10), 10).values
    assert not out[5:, 1].any()


# --- weights file -------------------------------------------------------------------------


def test_weights_round_trip_is_bit_exact(tmp_path):
    net = small_net(dtype=np.float32)
    path = tmp_path / "net.emw"
    save_weights(net, path)
    again = load_weights(path)
    save_weights(again, tmp_path / "again.emw")
    assert path.read_bytes() == (tmp_path / "again.emw").read_bytes()
    w = random_window(np.random.default_rng(0), net).astype(np.float32)
    assert np.array_equal(forward(net, w), forward(again, w))


def test_weights_header():
    blob = weights_bytes(small_net(dtype=np.float32))
    assert blob[:4] == b"EMW1" and int.from_bytes(blob[4:6], "little") == 1


@pytest.mark.parametrize("cut", [0, 3, 10, 100, -1])
def test_truncated_weights_are_rejected(tmp_path, cut):
    blob = weights_bytes(small_net(dtype=np.float32))
    path = tmp_path / "bad.emw"
    path.write_bytes(blob[:cut])
    with pytest.raises(WeightsFormatError):
        load_weights(path)


def test_flipped_byte_fails_the_checksum():
    blob = bytearray(weights_bytes(small_net(dtype=np.float32)))
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(WeightsFormatError):
        weights_from_bytes(bytes(blob))
