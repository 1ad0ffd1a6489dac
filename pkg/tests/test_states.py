"""Sliding window, history pooling, and state assembly."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markov_scale_gen.autodiff import Parameter, ShapeError, Tensor
from markov_scale_gen.states import (
    CompensationParams,
    HistoryQuery,
    MarkovState,
    SlidingWindow,
    assemble_state,
    broadcast_rows,
    embed_scale,
    pool_history,
    window_push,
)
from markov_scale_gen.tokenizer import ScaleSchedule


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tensor_item(rng, n, d):
    return Tensor(rng.normal(size=(n, d)))


class TestSlidingWindow:
    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            SlidingWindow(0)

    def test_eviction_order(self, rng):
        w = SlidingWindow(2)
        items = [tensor_item(rng, i + 1, 4) for i in range(4)]
        for it in items:
            w.push(it)
        assert w.items == items[2:]
        assert w.token_count() == 3 + 4

    def test_rejects_rank_and_width_mismatch(self, rng):
        w = SlidingWindow(3)
        w.push(tensor_item(rng, 2, 4))
        with pytest.raises(ShapeError):
            w.push(Tensor(rng.normal(size=(4,))))
        with pytest.raises(ShapeError):
            w.push(tensor_item(rng, 2, 5))

    def test_accepts_batched_items(self, rng):
        w = SlidingWindow(2)
        w.push(Tensor(rng.normal(size=(3, 2, 4))))
        w.push(Tensor(rng.normal(size=(3, 5, 4))))
        assert w.token_count() == 7

    def test_window_push_helper_returns_window(self, rng):
        w = SlidingWindow(1)
        assert window_push(w, tensor_item(rng, 1, 4)) is w

    @settings(max_examples=50, deadline=None)
    @given(
        capacity=st.integers(1, 5),
        pushes=st.lists(st.integers(1, 4), min_size=0, max_size=12),
    )
    def test_matches_reference_queue(self, capacity, pushes):
        # reference: a plain list truncated to the last `capacity` entries
        w = SlidingWindow(capacity)
        ref = []
        r = np.random.default_rng(len(pushes))
        for n in pushes:
            item = Tensor(r.normal(size=(n, 3)))
            w.push(item)
            ref.append(item)
            ref = ref[-capacity:]
        assert w.items == ref
        assert w.token_count() == sum(x.shape[-2] for x in ref)


class TestPoolHistory:
    def query(self, rng, d=6):
        return HistoryQuery(Parameter(rng.normal(size=(d,)), name="q"))

    def test_empty_window_gives_zero(self, rng):
        q = self.query(rng)
        h = pool_history(q, SlidingWindow(3))
        assert h.shape == (6,)
        assert np.all(h.data == 0.0)

    def test_single_token_exact(self, rng):
        q = self.query(rng)
        w = SlidingWindow(3)
        row = rng.normal(size=(1, 6))
        w.push(Tensor(row))
        h = pool_history(q, w)
        assert np.array_equal(h.data, row[0])

    def test_uniform_window_returns_common_token(self, rng):
        q = self.query(rng)
        w = SlidingWindow(4)
        v = rng.normal(size=6)
        for n in (1, 3, 2):
            w.push(Tensor(np.tile(v, (n, 1))))
        h = pool_history(q, w)
        assert np.abs(h.data - v).max() <= 1e-12

    def test_convex_combination_bound(self, rng):
        q = self.query(rng)
        for _ in range(200):
            w = SlidingWindow(4)
            rows = []
            for _ in range(int(rng.integers(1, 5))):
                item = rng.normal(size=(int(rng.integers(1, 4)), 6)) * rng.uniform(0.1, 4.0)
                rows.append(item)
                w.push(Tensor(item))
            stacked = np.concatenate(rows, axis=0)
            h = pool_history(q, w).data
            assert np.all(h >= stacked.min(axis=0) - 1e-12)
            assert np.all(h <= stacked.max(axis=0) + 1e-12)

    def test_batched_matches_per_item(self, rng):
        q = self.query(rng)
        batch = 3
        items = [rng.normal(size=(batch, n, 6)) for n in (2, 1)]
        wb = SlidingWindow(2)
        for it in items:
            wb.push(Tensor(it))
        hb = pool_history(q, wb).data
        assert hb.shape == (batch, 6)
        for b in range(batch):
            w = SlidingWindow(2)
            for it in items:
                w.push(Tensor(it[b]))
            assert np.allclose(hb[b], pool_history(q, w).data, atol=1e-14)

    def test_learned_projections_change_result(self, rng):
        q = self.query(rng)
        w = SlidingWindow(2)
        w.push(Tensor(rng.normal(size=(3, 6))))
        plain = pool_history(q, w).data
        kp = Tensor(rng.normal(size=(6, 6)))
        vp = Tensor(rng.normal(size=(6, 6)))
        projected = pool_history(q, w, key_proj=kp, value_proj=vp).data
        assert not np.allclose(plain, projected)


class TestAssembly:
    def test_broadcast_rows_shapes(self, rng):
        h = Tensor(rng.normal(size=(6,)))
        assert broadcast_rows(h, (4, 6)).shape == (4, 6)
        assert broadcast_rows(h, (2, 4, 6)).shape == (2, 4, 6)
        hb = Tensor(rng.normal(size=(2, 6)))
        out = broadcast_rows(hb, (2, 4, 6))
        assert out.shape == (2, 4, 6)
        assert np.array_equal(out.data[:, 0, :], hb.data)

    def test_assemble_state_is_linear(self, rng):
        # concat+projection with no bias: scaling both inputs scales the state
        d = 6
        proj = Tensor(rng.normal(size=(2 * d, d)))
        e = Tensor(rng.normal(size=(4, d)))
        h = Tensor(rng.normal(size=(d,)))
        one = assemble_state(e, h, proj, 2)
        two = assemble_state(Tensor(3.0 * e.data), Tensor(3.0 * h.data), proj, 2)
        assert np.allclose(two.tokens.data, 3.0 * one.tokens.data, atol=1e-12)
        assert one.scale_index == 2

    def test_markov_state_validation(self, rng):
        MarkovState(Tensor(rng.normal(size=(4, 8))), 1).validate(ScaleSchedule((1, 2)))
        with pytest.raises(ShapeError):
            MarkovState(Tensor(rng.normal(size=(3, 8))), 1).validate(ScaleSchedule((1, 2)))
        with pytest.raises(ValueError):
            MarkovState(Tensor(rng.normal(size=(4, 8))), 5).validate(ScaleSchedule((1, 2)))

    def test_embed_scale_downsamples_then_projects(self, rng):
        sch = ScaleSchedule((1, 2, 4))
        d_code, width = 5, 8
        wgt = Tensor(rng.normal(size=(d_code, width)))
        bias = Tensor(np.zeros(width))
        fhat = rng.normal(size=(4, 4, d_code))
        out = embed_scale(Tensor(fhat), 2, wgt, bias, sch)
        assert out.shape == (4, width)
        from markov_scale_gen.autodiff import resize_array

        want = resize_array(fhat, 2).reshape(4, d_code) @ wgt.data
        assert np.allclose(out.data, want, atol=1e-12)

    def test_compensation_params_init_and_collection(self, rng):
        comp = CompensationParams.init(rng, code_dim=5, width=8)
        names = [p.name for p in comp.parameters()]
        assert len(names) == len(set(names))
        assert len(names) == 4
        comp_kv = CompensationParams.init(rng, code_dim=5, width=8, learned_kv=True)
        assert len(comp_kv.parameters()) == 6
