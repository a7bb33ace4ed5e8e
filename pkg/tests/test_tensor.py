from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tta_bench import ops
from tta_bench.tensor import (
    Allocator,
    ContractError,
    Tape,
    Tensor,
    alloc_stats,
    allocator_scope,
    backward,
    counting,
    no_grad,
    precision,
    reset_peak,
)


def test_fresh_allocator_is_zero():
    with allocator_scope() as alloc:
        s = alloc_stats()
    assert (s.live_bytes, s.peak_bytes) == (0, 0)
    assert alloc.stats() == s


def test_image_tensor_counts_bytes():
    with allocator_scope():
        t = Tensor(np.zeros((3, 32, 32)))
        assert alloc_stats().live_bytes >= 12288
        del t


def test_free_leaves_peak_above_live():
    with allocator_scope():
        t = Tensor(np.zeros(2**18))   # 1 MiB of float32
        del t
        s = alloc_stats()
        assert s.live_bytes < s.peak_bytes
        assert s.peak_bytes >= 2**20
        reset_peak()
        assert alloc_stats().peak_bytes == alloc_stats().live_bytes


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 4096)), max_size=40))
def test_peak_envelopes_live(events):
    alloc = Allocator()
    live = []
    last_peak = 0
    for is_alloc, n in events:
        if is_alloc or not live:
            alloc.allocate(n)
            live.append(n)
        else:
            alloc.free(live.pop())
        assert alloc.peak_bytes >= alloc.live_bytes
        assert alloc.peak_bytes >= last_peak
        last_peak = alloc.peak_bytes


def test_scopes_are_isolated():
    with allocator_scope() as a:
        x = Tensor(np.zeros(100))
        with allocator_scope() as b:
            y = Tensor(np.zeros(10))
        assert b.live_bytes == 40
        assert a.live_bytes == 400
        del x, y
    assert a.live_bytes == 0 and b.live_bytes == 0


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(ops.elementwise_mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.scalar_scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_tape_single_use():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.tensor_sum(ops.elementwise_mul(x, x))
    backward(loss, tape)
    assert tape.consumed
    with pytest.raises(ContractError):
        backward(loss, tape)


def test_loss_from_other_tape_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as t1:
        loss = ops.tensor_sum(x)
    with Tape() as t2:
        ops.tensor_sum(ops.scalar_scale(x, 2.0))
    with pytest.raises(ContractError):
        backward(loss, t2)
    backward(loss, t1)


def test_shared_input_gradients_accumulate():
    x = Tensor([1.5, -2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.elementwise_add(ops.scalar_scale(x, 3.0), ops.elementwise_mul(x, x))
        loss = ops.tensor_sum(y)
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 3.0 + 2 * np.array([1.5, -2.0]), rtol=1e-6)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.scalar_scale(x, 2.0)
    assert len(tape.nodes) == 0


def test_ops_skip_tape_without_grad_inputs():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        ops.relu(x)
    assert len(tape.nodes) == 0


def test_tape_is_topological():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
    w = Tensor(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.mean_entropy(ops.relu(ops.matmul(x, w)))
    seen = {x.uid, w.uid}
    for node in tape.nodes:
        assert all(i.uid in seen for i in node.inputs)
        seen.add(node.output_uid)
    backward(loss, tape)


def test_precision_context_creates_float64():
    with precision(np.float64):
        t = Tensor([1.0])
    assert t.data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_counters_track_ops_and_backward():
    x = Tensor([1.0, -1.0], requires_grad=True)
    with counting() as c:
        with Tape() as tape:
            loss = ops.tensor_sum(ops.relu(x))
        backward(loss, tape)
    assert c.forward["relu"] == 1
    assert c.backward_passes == 1


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


def test_deterministic_op_sequence():
    def run():
        g = np.random.default_rng(3)
        x = Tensor(g.normal(size=(2, 3, 8, 8)))
        w = Tensor(g.normal(size=(4, 3, 3, 3)))
        return ops.global_avg_pool(ops.relu(ops.conv2d(x, w, padding=1))).data

    assert run().tobytes() == run().tobytes()
