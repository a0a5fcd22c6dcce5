"""The intent-aware diversity promoting (IDP) loss.

total = lam * L_rel + (1 - lam) * L_div, where L_rel is a position-weighted
list-wise likelihood of the ground truth and L_div rewards lists that cover
every mined intent with at least one relevant item.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch


@dataclass
class LossBreakdown:
    total: float
    relevance_term: float
    diversity_term: float
    lam: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_lam(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")


def step_probability(scores: torch.Tensor, target) -> torch.Tensor:
    """p*_t: the target's share of the step score mass over the candidates.

    ``scores`` must already be zero outside the candidate set.
    """
    scores = torch.as_tensor(scores)
    target = torch.as_tensor(target)
    denom = scores.sum(dim=-1)
    if (denom <= 0).any():
        raise ZeroDivisionError("step scores sum to zero")
    num = scores.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return num / denom


def mix_log_scores(lam: float, log_rel: torch.Tensor, log_int: torch.Tensor, log_mix: torch.Tensor) -> torch.Tensor:
    """log(lam * exp(log_rel) + (1 - lam) * sum_i exp(log_mix_i + log_int_i)).

    ``log_rel`` has shape (B, *S); ``log_int`` and ``log_mix`` broadcast to
    (B, M, *S). Returns (B, *S).
    """
    terms = []
    if lam > 0:
        terms.append(math.log(lam) + log_rel.unsqueeze(1))
    if lam < 1:
        terms.append(torch.broadcast_to(math.log(1 - lam) + log_mix + log_int, (log_int.shape[0], -1) + log_rel.shape[1:]))
    return torch.logsumexp(torch.cat(terms, dim=1), dim=1)


def log_candidate_mass(lam: float, log_rel, log_int, log_mix, selected: torch.Tensor) -> torch.Tensor:
    """log of one step's score mass over the candidates, by direct reduction.

    ``log_rel`` (B, V), ``log_int`` (B, M, V), ``log_mix`` (B, M) and
    ``selected`` a (B, V) mask of items already in the list.
    """
    rel_rem = torch.logsumexp(log_rel.masked_fill(selected, -math.inf), dim=1)
    int_rem = torch.logsumexp(log_int.masked_fill(selected[:, None], -math.inf), dim=2)
    return mix_log_scores(lam, rel_rem, int_rem, log_mix)


def log_remaining_mass(log_p: torch.Tensor, log_picks: torch.Tensor, picks: torch.Tensor) -> torch.Tensor:
    """log of the probability left off the earlier picks, at every step of a list.

    ``log_p`` is a softmax family, (B, V) or (B, M, V); ``log_picks`` its values
    at ``picks`` (B, N), shaped (B, N) or (B, M, N). What is left before step t
    is the mass never picked plus the picks from t on, so one masked reduction
    per row serves every step and nothing is subtracted from 1.
    """
    idx = picks.view(picks.shape[0], *([1] * (log_p.dim() - 2)), -1).expand(log_picks.shape)
    mask = torch.zeros_like(log_p, dtype=torch.bool).scatter(-1, idx, True)
    never = torch.logsumexp(log_p.masked_fill(mask, -math.inf), dim=-1, keepdim=True)
    tail = torch.logcumsumexp(log_picks.flip(-1), dim=-1).flip(-1)
    return torch.logaddexp(never, tail)


def linear_position(t: torch.Tensor) -> torch.Tensor:
    return t


def relevance_loss(
    log_target_probs: torch.Tensor,
    items: torch.Tensor,
    targets: torch.Tensor,
    weight: Callable[[torch.Tensor], torch.Tensor] = linear_position,
) -> torch.Tensor:
    """Per-sample list-wise relevance loss, shape (B,).

    Hit at 1-based position t0: -(1/N) * weight(t0) * log p*_t0.
    Miss: -(1/N) * sum_t log p*_t.
    """
    if log_target_probs is None:
        raise ValueError("relevance loss needs the retained per-step target probabilities")
    n = items.shape[1]
    if n < 1:
        raise ValueError("empty recommendation list")
    hit = items == targets[:, None]
    in_list = hit.any(dim=1)
    pos = torch.arange(1, n + 1, dtype=log_target_probs.dtype, device=items.device)
    safe = torch.where(hit, log_target_probs, torch.zeros_like(log_target_probs))
    hit_term = -(weight(pos) * safe).sum(dim=1) / n
    # rows with a hit hold -inf after the hit; keep them out of the unused branch
    miss_term = -torch.where(in_list[:, None], torch.zeros_like(log_target_probs), log_target_probs).sum(dim=1) / n
    return torch.where(in_list, hit_term, miss_term)


def diversity_loss(intent_weights: torch.Tensor, selected_intent_probs: torch.Tensor) -> torch.Tensor:
    """-sum_i P(a_i|u) * (1 - prod_v (1 - P(v|a_i))), per sample.

    ``selected_intent_probs``: (B, M, N) intent probabilities of the listed items.
    """
    if selected_intent_probs.shape[-1] < 1:
        raise ValueError("empty recommendation list")
    miss_all = torch.prod(1 - selected_intent_probs, dim=-1)
    return -(intent_weights * (1 - miss_all)).sum(dim=-1)


def idp_loss(lam: float, rel, div):
    """Combine the two terms; works on floats or tensors."""
    _check_lam(lam)
    return lam * rel + (1 - lam) * div


def breakdown(lam: float, rel: float, div: float) -> LossBreakdown:
    _check_lam(lam)
    return LossBreakdown(float(idp_loss(lam, rel, div)), float(rel), float(div), float(lam))


def batch_idp_loss(lam: float, out, targets: torch.Tensor, weight=linear_position):
    """Mean IDP loss over a batch of decoded lists -> (scalar tensor, LossBreakdown)."""
    rel = relevance_loss(out.log_target_probs, out.items, targets, weight)
    div = diversity_loss(out.intent_weights, out.selected_intent_probs)
    total = idp_loss(lam, rel, div).mean()
    rel_m, div_m = rel.mean().item(), div.mean().item()
    return total, LossBreakdown(total.item(), rel_m, div_m, float(lam))
