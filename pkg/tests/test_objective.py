import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from idsr.model import IDSR
from idsr.objective import (
    LossBreakdown,
    batch_idp_loss,
    breakdown,
    diversity_loss,
    idp_loss,
    log_candidate_mass,
    log_remaining_mass,
    relevance_loss,
    step_probability,
)

NEG_INF = -math.inf


def tiny_model(n_items=6, d=4, m=2, lam=0.5, seed=0, scale=1.0):
    model = IDSR(n_items, d, d, m, dropout=0.0, lam=lam).double()
    model.reset_parameters(torch.Generator().manual_seed(seed))
    with torch.no_grad():
        for p in model.parameters():
            p.mul_(scale)
    return model.eval()


def rel_loss(log_p, items, target):
    return relevance_loss(torch.tensor([log_p], dtype=torch.float64), torch.tensor([items]), torch.tensor([target]))[0].item()


class TestStepProbability:
    def test_uniform(self):
        assert step_probability(torch.full((4,), 0.1), 2).item() == pytest.approx(0.25)

    def test_hand_division(self):
        assert step_probability(torch.tensor([0.2, 0.1, 0.1], dtype=torch.float64), 0).item() == pytest.approx(0.5, abs=1e-15)

    def test_restricted_softmax_is_idempotent(self):
        rel = torch.softmax(torch.randn(6, dtype=torch.float64), 0)
        masked = rel.clone()
        masked[[1, 4]] = 0
        renorm = masked / masked.sum()
        for v in (0, 2, 3, 5):
            assert step_probability(masked, v).item() == pytest.approx(renorm[v].item(), abs=1e-15)
            assert step_probability(renorm, v).item() == pytest.approx(renorm[v].item(), abs=1e-15)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDivisionError):
            step_probability(torch.zeros(3), 0)


class TestRelevanceLoss:
    def test_hit_first(self):
        assert rel_loss([math.log(0.5), NEG_INF], [7, 3], 7) == pytest.approx(0.3466, abs=1e-4)
        assert rel_loss([math.log(0.5), NEG_INF], [7, 3], 7) == pytest.approx(-0.5 * math.log(0.5), abs=1e-6)

    def test_miss(self):
        assert rel_loss([math.log(0.5), math.log(0.5)], [1, 2], 7) == pytest.approx(0.6931, abs=1e-4)
        assert rel_loss([math.log(0.5), math.log(0.5)], [1, 2], 7) == pytest.approx(math.log(2), abs=1e-6)

    def test_hit_later_weighted_by_position(self):
        # earlier steps contribute nothing; the hit step is weighted by t0 = 3
        got = rel_loss([math.log(0.1), math.log(0.2), math.log(0.4), NEG_INF], [1, 2, 7, 3], 7)
        assert got == pytest.approx(-(1 / 4) * 3 * math.log(0.4), abs=1e-12)

    def test_perfect_prediction(self):
        assert rel_loss([math.log(1 - 1e-12), NEG_INF], [7, 3], 7) == pytest.approx(0.0, abs=1e-9)

    def test_custom_weight(self):
        loss = relevance_loss(torch.tensor([[-1.0, -2.0]]), torch.tensor([[4, 7]]), torch.tensor([7]),
                              weight=lambda t: 1.0 / t)
        assert loss.item() == pytest.approx(-(1 / 2) * 0.5 * -2.0)

    def test_missing_distributions(self):
        with pytest.raises(ValueError, match="per-step"):
            relevance_loss(None, torch.tensor([[1]]), torch.tensor([1]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=8), st.randoms())
    def test_miss_branch_permutation_invariant(self, probs, rnd):
        items = list(range(len(probs)))
        shuffled = probs[:]
        rnd.shuffle(shuffled)
        a = rel_loss([math.log(p) for p in probs], items, 99)
        b = rel_loss([math.log(p) for p in shuffled], items, 99)
        assert a == pytest.approx(b, abs=1e-12)
        assert a >= 0


class TestDiversityLoss:
    def test_full_coverage(self):
        assert diversity_loss(torch.tensor([[1.0]]), torch.tensor([[[1.0]]])).item() == -1.0

    def test_zero_coverage(self):
        assert diversity_loss(torch.tensor([[0.3, 0.7]]), torch.zeros(1, 2, 4)).item() == 0.0

    def test_hand_case(self):
        w = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        p = torch.tensor([[[0.5, 0.5], [0.1, 0.1]]], dtype=torch.float64)
        assert diversity_loss(w, p).item() == pytest.approx(-0.47, abs=1e-12)

    def test_empty_list(self):
        with pytest.raises(ValueError):
            diversity_loss(torch.ones(1, 1), torch.zeros(1, 1, 0))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_in_length_and_bounded(self, seed):
        rng = np.random.default_rng(seed)
        m, n = int(rng.integers(1, 4)), int(rng.integers(1, 8))
        w = torch.as_tensor(rng.dirichlet(np.ones(m)))[None]
        p = torch.as_tensor(rng.uniform(0, 1, (1, m, n + 1)))
        shorter = diversity_loss(w, p[..., :n]).item()
        longer = diversity_loss(w, p).item()
        assert longer <= shorter + 1e-15
        assert -1 - 1e-12 <= longer <= 0


class TestCombination:
    def test_endpoints(self):
        assert idp_loss(1.0, 0.7, -0.3) == 0.7
        assert idp_loss(0.0, 0.7, -0.3) == -0.3

    def test_hand_case(self):
        assert idp_loss(0.5, 0.6931, -0.47) == pytest.approx(0.11155, abs=1e-12)

    def test_lambda_range(self):
        for lam in (-0.1, 1.5):
            with pytest.raises(ValueError):
                idp_loss(lam, 0.1, -0.1)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 50), st.floats(-1, 0))
    def test_breakdown_recomposes(self, lam, rel, div):
        b = breakdown(lam, rel, div)
        assert isinstance(b, LossBreakdown)
        assert abs(b.total - (b.lam * b.relevance_term + (1 - b.lam) * b.diversity_term)) <= 1e-9


class TestAgainstOracle:
    @pytest.mark.parametrize("lam", [0.0, 0.3, 0.5, 1.0])
    @pytest.mark.parametrize("scale", [1.0, 6.0])
    def test_loss_matches_formulas(self, lam, scale):
        model = tiny_model(n_items=9, d=4, m=3, lam=lam, seed=7, scale=scale)
        P = oracles.params_of(model)
        gen = torch.Generator().manual_seed(3)
        x = torch.randint(0, 9, (8, 5), generator=gen)
        out = model.generate_list(x, 4)
        # half the targets are listed items so both relevance branches run
        y = torch.where(torch.arange(8) % 2 == 0, out.items[:, 2], torch.randint(0, 9, (8,), generator=gen))
        out = model.generate_list(x, 4, targets=y)
        rel = relevance_loss(out.log_target_probs, out.items, y)
        div = diversity_loss(out.intent_weights, out.selected_intent_probs)
        total = idp_loss(lam, rel, div)
        for b in range(8):
            expected = oracles.idp_loss(P, x[b].tolist(), y[b].item(), lam, 4, out.items[b].tolist())
            assert total[b].item() == pytest.approx(expected, abs=1e-10)

    @staticmethod
    def stepwise_mass(log_p, picks):
        """Per-step masked logsumexp over the items not yet picked."""
        out = []
        mask = torch.zeros_like(log_p, dtype=torch.bool)
        for t in range(picks.shape[1]):
            out.append(torch.logsumexp(log_p.masked_fill(mask, NEG_INF), -1))
            idx = picks[:, t].view(-1, *([1] * (log_p.dim() - 1))).expand(*log_p.shape[:-1], 1)
            mask.scatter_(-1, idx, True)
        return torch.stack(out, -1)

    def test_remaining_mass_matches_stepwise(self):
        rng = np.random.default_rng(0)
        logits = torch.as_tensor(rng.normal(0, 1, (5, 2, 30)))
        logits[:, :, 3] += 25  # one item holds nearly all the mass
        log_p = torch.log_softmax(logits, -1)
        picks = torch.as_tensor(np.stack([np.r_[3, rng.choice(np.r_[0:3, 4:30], 5, replace=False)] for _ in range(5)]))
        log_picks = log_p.gather(2, picks[:, None, :].expand(-1, 2, -1))
        got = log_remaining_mass(log_p, log_picks, picks)
        assert torch.allclose(got, self.stepwise_mass(log_p, picks), rtol=0, atol=1e-12)
        flat = log_remaining_mass(log_p[:, 0], log_p[:, 0].gather(1, picks), picks)
        assert torch.equal(flat, got[:, 0])

    def test_remaining_mass_keeps_precision_in_float32(self):
        # after the dominant pick, 1 - cumsum in float32 would lose every digit
        logits = torch.zeros(1, 50, dtype=torch.float64)
        logits[0, 0] = 30.0
        picks = torch.tensor([[0, 1, 2]])
        exact = self.stepwise_mass(torch.log_softmax(logits, -1), picks)
        log_p = torch.log_softmax(logits.float(), -1)
        got = log_remaining_mass(log_p, log_p.gather(1, picks), picks)
        assert torch.allclose(got.double(), exact, rtol=0, atol=1e-5)

    def test_remaining_mass_gradient_when_every_item_is_picked(self):
        logits = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        log_p = torch.log_softmax(logits, -1)
        picks = torch.tensor([[2, 0, 3, 1], [1, 2, 3, 0]])
        out = log_remaining_mass(log_p, log_p.gather(1, picks), picks)
        assert torch.allclose(out, self.stepwise_mass(log_p.detach(), picks), atol=1e-12)
        out.sum().backward()
        assert torch.isfinite(logits.grad).all()

    def test_candidate_mass_matches_score_sum(self):
        model = tiny_model(n_items=9, d=4, m=3, seed=2)
        x = torch.tensor([[1, 2, 3]])
        enc = model.encode_sequence(x)
        intents = model.mine_intents(enc)
        log_rel = torch.log_softmax(model.relevance_logits(enc.F_u), -1)
        log_int = torch.log_softmax(intents.reps @ model.item_embeddings.T, -1)
        state = model.init_state(intents)
        state = model.advance_tracker(state, torch.tensor([4]), intents)
        used = torch.zeros(1, 9, dtype=torch.bool)
        used[0, 4] = True
        got = log_candidate_mass(0.5, log_rel, log_int, intents.log_weights + state.log_unsat, used).exp()
        s = IDSR.combined_scores(0.5, log_rel.exp(), intents, log_int.exp(), state)
        assert got.item() == pytest.approx(s.sum().item(), abs=1e-14)


def finite_difference_check(model, x, y, n, eps=1e-5):
    """Max relative error per parameter block between autograd and central differences."""
    sel = model.generate_list(x, n).items

    def loss():
        out = model.generate_list(x, n, targets=y, selections=sel)
        return batch_idp_loss(model.lam, out, y)[0]

    model.zero_grad()
    loss().backward()
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad.detach().clone()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        for k in range(flat.numel()):
            old = flat[k].item()
            with torch.no_grad():
                flat[k] = old + eps
                up = loss().item()
                flat[k] = old - eps
                down = loss().item()
                flat[k] = old
            numeric.view(-1)[k] = (up - down) / (2 * eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors[name] = (analytic - numeric).norm().item() / denom
    return errors, sel


class TestGradient:
    def test_finite_differences(self):
        model = tiny_model(n_items=6, d=4, m=2, lam=0.5, seed=1, scale=2.0)
        x = torch.tensor([[0, 1, 2], [3, 4, 5], [5, 0, 3]])
        sel = model.generate_list(x, 2).items
        y = torch.tensor([sel[0, 1].item(), [v for v in range(6) if v not in sel[1]][0], sel[2, 0].item()])
        errors, _ = finite_difference_check(model, x, y, 2)
        assert set(errors) == {name for name, _ in model.named_parameters()}
        for name, err in errors.items():
            assert err <= 1e-4, (name, err)
