"""Emission head: marker stripping, masking, bypass contract, LSTM oracle."""
import numpy as np
import pytest
import torch

from oracles import check_gradients
from nestcrf.crf import PAD_TAG_SCORE
from nestcrf.emission import EmissionHead


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_bilstm_single_step(head: EmissionHead, x: np.ndarray) -> np.ndarray:
    """One position through both directions; torch gate order is i, f, g, o."""
    outs = []
    for suffix in ("", "_reverse"):
        w_ih = head.lstm.state_dict()[f"weight_ih_l0{suffix}"].numpy()
        w_hh = head.lstm.state_dict()[f"weight_hh_l0{suffix}"].numpy()
        b_ih = head.lstm.state_dict()[f"bias_ih_l0{suffix}"].numpy()
        b_hh = head.lstm.state_dict()[f"bias_hh_l0{suffix}"].numpy()
        gates = w_ih @ x + b_ih + b_hh  # h0 = 0 so w_hh contributes nothing
        assert w_hh.shape[0] == gates.shape[0]
        hsz = gates.shape[0] // 4
        i, f, g, o = (gates[k * hsz : (k + 1) * hsz] for k in range(4))
        c = sigmoid(i) * np.tanh(g)
        outs.append(sigmoid(o) * np.tanh(c))
    return np.concatenate(outs)


def token_encoding(chars: int, d: int, batch: int = 1, seed: int = 0):
    """Token-aligned random encoding: [CLS] + chars + [SEP]."""
    torch.manual_seed(seed)
    enc = torch.randn(batch, chars + 2, d, dtype=torch.float64)
    lengths = torch.full((batch,), chars + 2)
    return enc, lengths


class TestShapesAndMasking:
    def test_strip_markers(self):
        enc, lengths = token_encoding(4, 3)
        chars, char_lengths = EmissionHead.strip_markers(enc, lengths)
        assert chars.shape == (1, 4, 3)
        assert char_lengths.tolist() == [4]
        assert torch.equal(chars[0], enc[0, 1:5])

    def test_strip_markers_rejects_empty(self):
        with pytest.raises(ValueError, match="at least one character"):
            EmissionHead.strip_markers(torch.zeros(1, 5, 2), torch.tensor([2]))

    def test_output_shape_and_masks(self):
        torch.manual_seed(1)
        head = EmissionHead(6, 4, [4, 18]).double()
        enc = torch.randn(2, 7, 6, dtype=torch.float64)
        lengths = torch.tensor([7, 4])  # 5 and 2 characters
        for class_id, d_t in ((0, 4), (1, 18)):
            scores, char_lengths = head(enc, lengths, class_id)
            assert scores.shape == (2, 5, d_t)
            assert char_lengths.tolist() == [5, 2]
            assert (scores[0, :, -1] == PAD_TAG_SCORE).all()
            assert (scores[1, :2, -1] == PAD_TAG_SCORE).all()
            assert (scores[1, 2:] == 0.0).all()  # beyond length: entire rows zero

    def test_zero_everything_gives_zero_valid_rows(self):
        head = EmissionHead(5, 3, [4]).double()
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        enc = torch.zeros(1, 6, 5, dtype=torch.float64)
        scores, _ = head(enc, torch.tensor([6]), 0)
        assert (scores[..., :-1] == 0.0).all()
        assert (scores[0, :, -1] == PAD_TAG_SCORE).all()


class TestBypass:
    def test_projection_of_encoding_exactly(self):
        torch.manual_seed(5)
        head = EmissionHead(6, 4, [5], use_recurrent=False).double()
        enc, lengths = token_encoding(3, 6, seed=7)
        scores, _ = head(enc, lengths, 0)
        direct = head.projections[0](enc[0, 1:4])
        assert torch.allclose(scores[0, :, :-1], direct, atol=1e-15)
        assert head.lstm is None


class TestRecurrentOracle:
    def test_single_step_matches_script(self):
        torch.manual_seed(9)
        head = EmissionHead(4, 3, [5]).double().eval()
        enc, lengths = token_encoding(1, 4, seed=3)
        scores, char_lengths = head(enc, lengths, 0)
        assert char_lengths.tolist() == [1]
        x = enc[0, 1].numpy()
        ctx = np_bilstm_single_step(head, x)
        want = head.projections[0].weight.detach().numpy() @ ctx
        want = want + head.projections[0].bias.detach().numpy()
        assert np.abs(scores[0, 0, :-1].detach().numpy() - want).max() <= 1e-6

    def test_reverse_direction_respects_lengths(self):
        # a short row inside a padded batch must match its solo run
        torch.manual_seed(11)
        head = EmissionHead(5, 4, [6]).double().eval()
        enc = torch.randn(2, 8, 5, dtype=torch.float64)
        lengths = torch.tensor([8, 4])
        batch_scores, _ = head(enc, lengths, 0)
        solo_scores, _ = head(enc[1:2, :4], torch.tensor([4]), 0)
        assert torch.allclose(batch_scores[1, :2], solo_scores[0], atol=1e-12)


class TestGradients:
    def test_gradcheck_recurrent_and_projection(self):
        torch.manual_seed(2)
        head = EmissionHead(3, 2, [4, 6]).double()
        enc = torch.randn(2, 5, 3, dtype=torch.float64, requires_grad=True)
        lengths = torch.tensor([5, 4])
        probe0 = torch.randn(2, 3, 4, dtype=torch.float64)
        probe1 = torch.randn(2, 3, 6, dtype=torch.float64)

        def loss():
            s0, _ = head(enc, lengths, 0)
            s1, _ = head(enc, lengths, 1)
            return (s0 * probe0).sum() + (s1 * probe1).sum()

        params = {name: p for name, p in head.named_parameters()}
        params["encoding"] = enc
        errs = check_gradients(params, loss)
        assert max(errs.values()) <= 1e-4
