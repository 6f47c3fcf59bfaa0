import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustkit.attacks import fast_l2_spec
from robustkit.data import generate_shapes_dataset
from robustkit.distributed import (DistributedError, FrameError, GradientFrame, HELLO, ShardPlan,
                                   all_reduce_mean, decode_frame, distributed_train, encode_frame,
                                   encode_message, pack_gradients, recv_message, shard_batch, worker_step)
from robustkit.models import ModelConfig, build_model, loss_and_grads
from robustkit.training import DivergenceError, TrainConfig, perturb, train_adversarial

SHAPES = {"a": (2, 3), "b": (4,)}


def _frame(worker, grads, size=1, epoch=0, step=0, dtype=np.float64):
    return GradientFrame.build(epoch, step, worker, size, pack_gradients(grads, dtype))


def _grads(rng):
    return {k: rng.normal(size=s) for k, s in SHAPES.items()}


def test_shard_examples():
    assert [len(s) for s in shard_batch(np.arange(256), 8)] == [32] * 8
    assert np.array_equal(shard_batch(np.arange(7), 1)[0], np.arange(7))
    parts = shard_batch(np.arange(10), 4)
    assert [len(s) for s in parts] == [3, 3, 2, 2]
    assert np.array_equal(np.concatenate(parts), np.arange(10))
    with pytest.raises(ValueError, match="empty shards"):
        shard_batch(np.arange(3), 4)
    with pytest.raises(ValueError):
        shard_batch(np.arange(3), 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 16))
def test_shard_plan_partitions(n, workers):
    batch = min(n, 64)
    if workers > min(batch, n - (n // batch) * batch or batch):
        return
    plan = ShardPlan.for_epoch(0, 0, n, batch, workers)
    seen = []
    for shards in plan.shards:
        sizes = [len(s) for s in shards]
        assert max(sizes) - min(sizes) <= 1
        seen.extend(np.concatenate(shards).tolist())
    assert sorted(seen) == list(range(n))


def test_frame_round_trip_is_byte_exact(rng):
    frame = _frame(3, _grads(rng), size=17, epoch=2, step=9)
    raw = encode_frame(frame)
    back = decode_frame(raw)
    assert back == frame and encode_frame(back) == raw
    assert struct.unpack_from("<I", raw)[0] == 0x52474431
    assert struct.unpack_from("<I", raw, 4)[0] == len(raw) - 8


def test_frame_corruption_is_detected(rng):
    good = _frame(0, _grads(rng))
    raw = bytearray(encode_frame(_frame(1, _grads(rng))))
    raw[30] ^= 0xFF
    with pytest.raises(FrameError, match="worker 1"):
        all_reduce_mean([good, decode_frame(bytes(raw))], SHAPES, np.float64)
    with pytest.raises(FrameError, match="magic"):
        decode_frame(b"\x00" * 40)
    with pytest.raises(FrameError, match="length"):
        decode_frame(bytes(raw[:-3]))


def test_reduce_identical_frames(rng):
    g = _grads(rng)
    out = all_reduce_mean([_frame(w, g, size=5) for w in range(3)], SHAPES, np.float64)
    assert all(np.allclose(out[k], g[k], rtol=1e-15) for k in g)


def test_reduce_cancellation(rng):
    g = _grads(rng)
    out = all_reduce_mean([_frame(0, g), _frame(1, {k: -v for k, v in g.items()})], SHAPES, np.float64)
    assert all(not out[k].any() for k in out)


def test_reduce_weighted_mean(rng):
    a, b, c = _grads(rng), _grads(rng), _grads(rng)
    frames = [_frame(2, c, 1), _frame(0, a, 2), _frame(1, b, 1)]
    out = all_reduce_mean(frames, SHAPES, np.float64)
    for k in SHAPES:
        assert np.allclose(out[k], (2 * a[k] + b[k] + c[k]) / 4, rtol=1e-14)
    shuffled = all_reduce_mean(frames[::-1], SHAPES, np.float64)
    assert all(out[k].tobytes() == shuffled[k].tobytes() for k in out)


def test_reduce_membership_errors(rng):
    g = _grads(rng)
    with pytest.raises(DistributedError, match="duplicate"):
        all_reduce_mean([_frame(0, g), _frame(0, g)], SHAPES, np.float64)
    with pytest.raises(DistributedError, match=r"missing frames from workers \[1\]"):
        all_reduce_mean([_frame(0, g), _frame(2, g)], SHAPES, np.float64, workers=3)
    with pytest.raises(DistributedError, match="disagree"):
        all_reduce_mean([_frame(0, g), _frame(1, g, step=1)], SHAPES, np.float64)


@pytest.fixture(scope="module")
def toy():
    data = generate_shapes_dataset(48, classes=4, image_size=8, seed=3)
    model = build_model(ModelConfig("rescnn", (1, 8, 8), (4, 8), 4), seed=1, dtype="float64", residual_scale=0.5)
    return model, data


def test_worker_step_single_sample_and_determinism(toy):
    model, data = toy
    spec = fast_l2_spec(0.5)
    before = {k: v.copy() for k, v in model.params.items()}
    frame, _, _ = worker_step(model, data, [5], spec, 7, 2, 0, 0)
    x = perturb(model, data.inputs[[5]].astype(np.float64), data.labels[[5]], spec, [(7, 2, 5)])
    _, _, grads, _ = loss_and_grads(model, x, data.labels[[5]])
    assert frame.payload == pack_gradients(grads, np.float64)
    again, _, _ = worker_step(model, data, [5], spec, 7, 2, 0, 0)
    assert again == frame
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_sharded_gradients_match_monolithic(toy):
    model, data = toy
    spec = fast_l2_spec(0.5)
    idx = np.arange(3, 40)
    shapes = {k: v.shape for k, v in model.params.items()}
    frames = [worker_step(model, data, s, spec, 1, 0, 0, w)[0] for w, s in enumerate(shard_batch(idx, 5))]
    reduced = all_reduce_mean(frames, shapes, np.float64)
    x = perturb(model, data.inputs[idx].astype(np.float64), data.labels[idx], spec, [(1, 0, int(i)) for i in idx])
    _, _, full, _ = loss_and_grads(model, x, data.labels[idx])
    for k in full:
        scale = max(np.abs(full[k]).max(), 1e-12)
        assert np.abs(reduced[k] - full[k]).max() / scale < 1e-6


def test_single_worker_matches_train_adversarial(toy):
    model, data = toy
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, attack=fast_l2_spec(0.5), seed=2)
    ref = train_adversarial(model.copy(), data, None, cfg).model
    dist = distributed_train(model.copy(), data, None, cfg, workers=1).model
    assert all(ref.params[k].tobytes() == dist.params[k].tobytes() for k in ref.params)


def test_float64_worker_invariance(toy):
    model, data = toy
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.05, attack=fast_l2_spec(0.5), seed=2)
    one = distributed_train(model.copy(), data, None, cfg, workers=1).model
    four = distributed_train(model.copy(), data, None, cfg, workers=4).model
    assert max(np.abs(one.params[k] - four.params[k]).max() for k in one.params) < 1e-10


def test_socket_matches_inprocess(toy):
    model, data = toy
    cfg = TrainConfig(epochs=1, batch_size=16, lr=0.05, attack=fast_l2_spec(0.5), seed=2)
    a = distributed_train(model.copy(), data, None, cfg, workers=3).model
    b = distributed_train(model.copy(), data, None, cfg, workers=3, transport="socket", timeout=30).model
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_disconnect_names_worker_and_step(toy):
    model, data = toy
    cfg = TrainConfig(epochs=1, batch_size=16, lr=0.05, seed=0)

    def flaky(address):
        def run():
            with socket.create_connection(address) as sock:
                sock.sendall(encode_message(HELLO))
                recv_message(sock)  # setup
                recv_message(sock)  # first step request, then hang up
        threading.Thread(target=run, daemon=True).start()

    with pytest.raises(DistributedError, match="worker 0 disconnected at epoch 0 step 0"):
        distributed_train(model.copy(), data, None, cfg, workers=1, transport="socket",
                          socket_workers="external", on_listen=flaky, timeout=30)


def test_invalid_worker_setups(toy):
    model, data = toy
    cfg = TrainConfig(epochs=1, batch_size=16)
    with pytest.raises(ValueError, match="exceed"):
        distributed_train(model.copy(), data, None, cfg, workers=17)
    with pytest.raises(ValueError, match="transport"):
        distributed_train(model.copy(), data, None, cfg, workers=2, transport="carrier-pigeon")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_coordinator_stops_on_divergence(toy):
    model, data = toy
    config = TrainConfig(epochs=5, batch_size=16, lr=1e8, momentum=0.0, val_every=100)
    with pytest.raises(DivergenceError, match="epoch"):
        distributed_train(model.copy(), data, None, config, 2)
