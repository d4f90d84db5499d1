"""Sibling queries, attention residual, two-pass decoding, change accounting."""
import numpy as np
import pytest
import torch

from oracles import check_gradients, crf_best_path
from nestcrf.attention import (
    ChangeStats,
    SiblingQueryMaps,
    attend,
    change_stats,
    change_stats_csv,
    one_hot_decodes,
    second_pass_emissions,
    two_pass_decode,
)
from nestcrf.crf import PAD_TAG_SCORE, LinearChainCrf


def np_attend(Q, H, n):
    d_t = H.shape[-1]
    scores = Q @ H.T / np.sqrt(d_t)
    scores[:, n:] = -np.inf
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    A = e / e.sum(axis=-1, keepdims=True)
    R = A @ H
    R[n:] = 0.0
    return R, A


def random_crf(num_tags, seed, scale=2.0):
    torch.manual_seed(seed)
    crf = LinearChainCrf(num_tags).double()
    with torch.no_grad():
        crf.transitions.copy_(torch.randn_like(crf.transitions) * scale)
        crf.start_scores.copy_(torch.randn_like(crf.start_scores))
        crf.stop_scores.copy_(torch.randn_like(crf.stop_scores))
    return crf


def masked_emissions(batch, length, num_tags, lengths, seed):
    torch.manual_seed(seed)
    e = torch.randn(batch, length, num_tags, dtype=torch.float64)
    pos = torch.arange(length)
    valid = pos.unsqueeze(0) < lengths.unsqueeze(1)
    e = e * valid.unsqueeze(-1)
    e[..., -1] = PAD_TAG_SCORE * valid
    return e


class TestOneHot:
    def test_padding_rows_zero(self):
        decoded = torch.tensor([[1, 0, 3, 3]])
        oh = one_hot_decodes(decoded, 4, torch.tensor([2]))
        assert oh[0, 0].tolist() == [0, 1, 0, 0]
        assert oh[0, 1].tolist() == [1, 0, 0, 0]
        assert (oh[0, 2:] == 0).all()


class TestBuildQuery:
    def test_zero_parameters_zero_query(self):
        maps = SiblingQueryMaps([3, 5]).double()
        q = maps.build_query({1: torch.tensor([[0, 2, 4]])}, torch.tensor([3]), 0)
        assert (q == 0).all()

    def test_identity_map_reproduces_one_hot(self):
        maps = SiblingQueryMaps([4, 4]).double()
        with torch.no_grad():
            maps.maps["1to0"].copy_(torch.eye(4, dtype=torch.float64))
        decoded = torch.tensor([[2, 0, 1]])
        q = maps.build_query({1: decoded}, torch.tensor([3]), 0)
        want = one_hot_decodes(decoded, 4, torch.tensor([3])).double()
        assert torch.equal(q, want)

    def test_three_class_additivity(self):
        torch.manual_seed(6)
        maps = SiblingQueryMaps([3, 4, 5]).double()
        with torch.no_grad():
            for p in maps.parameters():
                p.copy_(torch.randn_like(p))
        lengths = torch.tensor([4])
        d1 = torch.tensor([[0, 1, 2, 3]])
        d2 = torch.tensor([[4, 0, 1, 2]])
        q_both = maps.build_query({1: d1, 2: d2}, lengths, 0)
        oh1 = one_hot_decodes(d1, 4, lengths).double()
        oh2 = one_hot_decodes(d2, 5, lengths).double()
        want = oh1 @ maps.maps["1to0"] + oh2 @ maps.maps["2to0"] + maps.biases[0]
        assert torch.allclose(q_both, want, atol=1e-12)

    def test_missing_sibling_rejected(self):
        maps = SiblingQueryMaps([3, 4, 5])
        with pytest.raises(ValueError, match="sibling decodes cover"):
            maps.build_query({1: torch.tensor([[0]])}, torch.tensor([1]), 0)


class TestAttend:
    def test_zero_query_uniform_mean(self):
        torch.manual_seed(3)
        h = torch.randn(1, 5, 4, dtype=torch.float64)
        lengths = torch.tensor([3])
        residual, attn = attend(torch.zeros_like(h), h, lengths)
        want_row = h[0, :3].mean(dim=0)
        for p in range(3):
            assert torch.allclose(residual[0, p], want_row, atol=1e-12)
            assert attn[0, p, :3].sum().item() == pytest.approx(1.0, abs=1e-9)
            assert (attn[0, p, 3:] == 0).all()
        assert (residual[0, 3:] == 0).all()

    def test_single_position(self):
        h = torch.randn(1, 3, 4, dtype=torch.float64)
        residual, attn = attend(torch.randn_like(h), h, torch.tensor([1]))
        assert attn[0, 0, 0].item() == 1.0
        assert torch.allclose(residual[0, 0], h[0, 0])

    def test_matches_scripted_oracle(self):
        rng = np.random.default_rng(55)
        Q = rng.normal(size=(6, 4))
        H = rng.normal(size=(6, 4))
        n = 4
        want_R, want_A = np_attend(Q, H, n)
        residual, attn = attend(
            torch.from_numpy(Q).unsqueeze(0), torch.from_numpy(H).unsqueeze(0),
            torch.tensor([n]),
        )
        assert np.abs(residual[0].numpy() - want_R).max() <= 1e-6
        assert np.abs(attn[0, :, :].numpy()[:, :n] - want_A[:, :n]).max() <= 1e-6

    def test_scale_applied_once(self):
        # same raw scores at two widths must differ exactly by the sqrt ratio
        rng = np.random.default_rng(1)
        Q4 = rng.normal(size=(1, 3, 4))
        H4 = rng.normal(size=(1, 3, 4))
        Q9 = np.zeros((1, 3, 9))
        H9 = np.zeros((1, 3, 9))
        Q9[..., :4], H9[..., :4] = Q4, H4
        lengths = torch.tensor([3])
        _, a4 = attend(torch.from_numpy(Q4), torch.from_numpy(H4), lengths)
        _, a9 = attend(torch.from_numpy(Q9), torch.from_numpy(H9), lengths)
        raw = torch.from_numpy(Q4[0] @ H4[0].T)
        assert torch.allclose(a4[0], torch.softmax(raw / 2.0, dim=-1), atol=1e-12)
        assert torch.allclose(a9[0], torch.softmax(raw / 3.0, dim=-1), atol=1e-12)

    def test_row_stochastic_random(self):
        torch.manual_seed(8)
        for trial in range(20):
            lengths = torch.tensor([torch.randint(1, 7, ()).item()])
            q = torch.randn(1, 7, 5, dtype=torch.float64) * 3
            h = torch.randn(1, 7, 5, dtype=torch.float64) * 3
            _, attn = attend(q, h, lengths)
            n = int(lengths[0])
            sums = attn[0, :, :n].sum(dim=-1)
            assert (sums - 1.0).abs().max().item() <= 1e-6


class TestTwoPass:
    def setup_batch(self, seed=17, batch=3, length=5):
        lengths = torch.tensor([5, 3, 1][:batch])
        e0 = masked_emissions(batch, length, 4, lengths, seed)
        e1 = masked_emissions(batch, length, 6, lengths, seed + 1)
        crfs = [random_crf(4, seed + 2), random_crf(6, seed + 3)]
        maps = SiblingQueryMaps([4, 6]).double()
        with torch.no_grad():
            for p in maps.parameters():
                torch.manual_seed(seed + 4)
                p.copy_(torch.randn_like(p))
        return [e0, e1], lengths, crfs, maps

    def test_residual_off_identity(self):
        emissions, lengths, crfs, maps = self.setup_batch()
        result = two_pass_decode(emissions, lengths, crfs, maps, residual_on=False)
        for p1, p2 in zip(result.pass1, result.pass2):
            assert torch.equal(p1, p2)
        assert result.corrected is None

    def test_pass2_is_viterbi_on_corrected(self):
        emissions, lengths, crfs, maps = self.setup_batch()
        result = two_pass_decode(emissions, lengths, crfs, maps)
        for i, crf in enumerate(crfs):
            again = crf.viterbi(result.corrected[i], lengths)
            assert torch.equal(result.pass2[i], again)

    def test_pass2_matches_brute_force(self):
        torch.manual_seed(23)
        for trial in range(30):
            n = int(torch.randint(1, 6, ()))
            d0, d1 = int(torch.randint(2, 6, ())), int(torch.randint(2, 6, ()))
            lengths = torch.tensor([n])
            e = [
                masked_emissions(1, n, d0, lengths, 100 + trial),
                masked_emissions(1, n, d1, lengths, 200 + trial),
            ]
            crfs = [random_crf(d0, 300 + trial), random_crf(d1, 400 + trial)]
            maps = SiblingQueryMaps([d0, d1]).double()
            with torch.no_grad():
                for p in maps.parameters():
                    p.copy_(torch.randn_like(p))
            result = two_pass_decode(e, lengths, crfs, maps)
            for i, crf in enumerate(crfs):
                corrected = result.corrected[i][0, :, :-1].detach().numpy()
                want, _ = crf_best_path(
                    corrected,
                    crf.transitions.detach().numpy(),
                    crf.start_scores.detach().numpy(),
                    crf.stop_scores.detach().numpy(),
                )
                assert result.pass2[i][0, :n].tolist() == want

    def test_corrected_keeps_masking(self):
        emissions, lengths, crfs, maps = self.setup_batch()
        result = two_pass_decode(emissions, lengths, crfs, maps)
        for cor in result.corrected:
            for b, n in enumerate(lengths.tolist()):
                assert (cor[b, :n, -1] == PAD_TAG_SCORE).all()
                assert (cor[b, n:] == 0).all()

    def test_gradients_flow_to_maps_not_decodes(self):
        torch.manual_seed(31)
        lengths = torch.tensor([3, 2])
        e0 = masked_emissions(2, 3, 4, lengths, 41).requires_grad_(True)
        e1 = masked_emissions(2, 3, 5, lengths, 42).requires_grad_(True)
        crfs = [random_crf(4, 43), random_crf(5, 44)]
        maps = SiblingQueryMaps([4, 5]).double()
        with torch.no_grad():
            for p in maps.parameters():
                p.copy_(torch.randn_like(p) * 0.5)
        pass1 = [crf.viterbi(e.detach(), lengths) for crf, e in zip(crfs, [e0, e1])]
        probe0 = torch.randn(2, 3, 4, dtype=torch.float64)
        probe1 = torch.randn(2, 3, 5, dtype=torch.float64)

        def loss():
            cor = second_pass_emissions([e0, e1], pass1, lengths, maps)
            return (cor[0] * probe0).sum() + (cor[1] * probe1).sum()

        params = {name: p for name, p in maps.named_parameters()}
        params["e0"], params["e1"] = e0, e1
        errs = check_gradients(params, loss)
        assert max(errs.values()) <= 1e-4


class TestChangeStats:
    def test_no_change(self):
        p = torch.tensor([[0, 1, 2]])
        st = change_stats(p, p.clone(), torch.tensor([[2, 1, 0]]), torch.tensor([3]))
        assert (st.changed, st.positive) == (0, 0)
        assert st.ratio is None

    def test_all_corrected(self):
        gold = torch.arange(10).unsqueeze(0) % 3
        pass1 = (gold + 1) % 3
        st = change_stats(pass1, gold.clone(), gold, torch.tensor([10]))
        assert (st.changed, st.positive) == (10, 10)
        assert st.ratio == 1.0

    def test_mixed_and_masked(self):
        pass1 = torch.tensor([[0, 0, 0, 9]])
        pass2 = torch.tensor([[1, 2, 0, 0]])
        gold = torch.tensor([[1, 0, 0, 0]])
        st = change_stats(pass1, pass2, gold, torch.tensor([3]))
        # position 0: changed, now gold (positive); position 1: changed, wrong
        assert (st.changed, st.positive) == (2, 1)
        assert st.ratio == pytest.approx(0.5)

    def test_aggregation_and_csv(self):
        total = ChangeStats(0, 0) + ChangeStats(3, 2) + ChangeStats(1, 0)
        assert (total.changed, total.positive) == (4, 2)
        csv = change_stats_csv([ChangeStats(4816, 3170), ChangeStats(0, 0)])
        lines = csv.strip().splitlines()
        assert lines[0] == "class,changed,positive,ratio"
        assert lines[1] == "0,4816,3170,0.6582"
        assert lines[2] == "1,0,0,"
