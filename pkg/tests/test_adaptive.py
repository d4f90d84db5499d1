"""Layer-weight normalization and combination against scripted numpy oracles."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import check_gradients
from nestcrf.adaptive import AdaptiveLayerWeights, combine_states, normalize_weights


def np_softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


class TestNormalize:
    def test_uniform_at_zero(self):
        w = normalize_weights(torch.zeros(13))
        assert torch.allclose(w, torch.full((13,), 1.0 / 13.0, dtype=torch.float64))
        assert w.sum().item() == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self):
        raw = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=torch.float64)
        assert torch.allclose(
            normalize_weights(raw), normalize_weights(raw + 57.0), atol=1e-12
        )

    def test_matches_scripted_softmax(self):
        raw = torch.tensor([2.0, 1.0, 0.0, -1.0], dtype=torch.float64)
        want = np_softmax(np.array([2.0, 1.0, 0.0, -1.0]))
        assert np.abs(normalize_weights(raw).numpy() - want).max() <= 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            normalize_weights(torch.tensor([0.0, float("nan")]))
        with pytest.raises(ValueError, match="non-finite"):
            normalize_weights(torch.tensor([0.0, float("inf")]))

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=16))
    @settings(max_examples=200, deadline=None)
    def test_always_a_distribution(self, logits):
        w = normalize_weights(torch.tensor(logits, dtype=torch.float64))
        assert (w > 0).all()
        assert w.sum().item() == pytest.approx(1.0, abs=1e-9)


class TestCombine:
    def test_one_hot_selects_layer(self):
        torch.manual_seed(0)
        states = torch.randn(2, 4, 5, 3, dtype=torch.float64)
        for k in range(4):
            w = torch.zeros(4, dtype=torch.float64)
            w[k] = 1.0
            assert torch.equal(combine_states(states, w), states[:, k])

    def test_uniform_over_identical_layers(self):
        layer = torch.randn(1, 6, 4, dtype=torch.float64)
        states = layer.unsqueeze(1).repeat(1, 3, 1, 1)
        w = torch.full((3,), 1.0 / 3.0, dtype=torch.float64)
        assert torch.allclose(combine_states(states, w), layer, atol=1e-15)

    def test_matches_scripted_weighted_sum(self):
        rng = np.random.default_rng(8)
        states = rng.normal(size=(2, 3, 4, 5))
        w = np.array([0.2, 0.3, 0.5])
        want = (states * w[None, :, None, None]).sum(axis=1)
        got = combine_states(torch.from_numpy(states), torch.from_numpy(w))
        assert np.abs(got.numpy() - want).max() <= 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            combine_states(torch.zeros(1, 3, 2, 2), torch.zeros(4))
        with pytest.raises(ValueError, match="batch"):
            combine_states(torch.zeros(3, 2, 2), torch.zeros(3))


class TestModule:
    def test_zero_init_uniform(self):
        mod = AdaptiveLayerWeights(2, 5)
        assert torch.allclose(mod.normalized(), torch.full((2, 5), 0.2, dtype=torch.float64))

    def test_dump_csv(self):
        mod = AdaptiveLayerWeights(2, 13)
        lines = mod.dump_csv().strip().splitlines()
        assert lines[0] == "class,layer,weight"
        assert len(lines) == 1 + 26
        for i in range(2):
            rows = [l for l in lines[1:] if l.startswith(f"{i},")]
            total = sum(float(l.split(",")[2]) for l in rows)
            assert total == pytest.approx(1.0, abs=1e-9)

    def test_gradcheck_through_combination(self):
        torch.manual_seed(13)
        mod = AdaptiveLayerWeights(2, 4).double()
        with torch.no_grad():
            mod.raw.copy_(torch.randn(2, 4, dtype=torch.float64))
        states = torch.randn(2, 4, 3, 5, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(2, 2, 3, 5, dtype=torch.float64)

        def loss():
            mixed = torch.stack(
                [mod.class_encoding(states, 0), mod.class_encoding(states, 1)], dim=1
            )
            return (mixed * probe).sum()

        errs = check_gradients({"raw": mod.raw, "states": states}, loss)
        assert max(errs.values()) <= 1e-4

    def test_sums_remain_one_after_optimizer_steps(self):
        torch.manual_seed(3)
        mod = AdaptiveLayerWeights(2, 6)
        opt = torch.optim.AdamW(mod.parameters(), lr=0.1, weight_decay=1e-2)
        target = torch.randn(2, 2, 3, 5)
        states = torch.randn(2, 6, 3, 5)
        for _ in range(25):
            opt.zero_grad()
            mixed = torch.stack(
                [mod.class_encoding(states, 0), mod.class_encoding(states, 1)], dim=1
            )
            ((mixed - target) ** 2).mean().backward()
            opt.step()
            sums = mod.normalized().sum(dim=-1)
            assert (sums - 1.0).abs().max().item() <= 1e-9
