"""The IDSR network: GRU encoder, multi-intent attention and the greedy list decoder.

Tensors are batched: item sequences are ``(B, T)`` index tensors and every
per-user quantity carries a leading batch axis. Matrices act on row vectors
(``x @ W``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .objective import batch_idp_loss, log_remaining_mass, mix_log_scores


def xavier_uniform_(tensor: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Glorot-uniform over the last two axes (fan_in, fan_out); leading axes are stacked matrices."""
    fan_in, fan_out = tensor.shape[-2], tensor.shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class GRUEncoder(nn.Module):
    """Bias-free gated recurrence.

    z = sigmoid([x, h] W_z), r = sigmoid([x, h] W_r),
    h_hat = tanh([x, r * h] W_h), h' = (1 - z) * h + z * h_hat
    """

    def __init__(self, d_in: int, d_hidden: int):
        super().__init__()
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.W_z = nn.Parameter(torch.empty(d_in + d_hidden, d_hidden))
        self.W_r = nn.Parameter(torch.empty(d_in + d_hidden, d_hidden))
        self.W_h = nn.Parameter(torch.empty(d_in + d_hidden, d_hidden))

    def step(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        xh = torch.cat([x, h], dim=-1)
        z = torch.sigmoid(xh @ self.W_z)
        r = torch.sigmoid(xh @ self.W_r)
        h_hat = torch.tanh(torch.cat([x, r * h], dim=-1) @ self.W_h)
        return (1 - z) * h + z * h_hat

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (B, T, d_in) -> hidden states (B, T, d_hidden)."""
        B, T, _ = x.shape
        h = x.new_zeros(B, self.d_hidden) if h0 is None else h0
        d = self.d_in
        # input halves of the gate projections for all steps at once
        xz = x @ self.W_z[:d]
        xr = x @ self.W_r[:d]
        xc = x @ self.W_h[:d]
        out = []
        for t in range(T):
            z = torch.sigmoid(xz[:, t] + h @ self.W_z[d:])
            r = torch.sigmoid(xr[:, t] + h @ self.W_r[d:])
            h_hat = torch.tanh(xc[:, t] + (r * h) @ self.W_h[d:])
            h = (1 - z) * h + z * h_hat
            out.append(h)
        return torch.stack(out, dim=1)


@dataclass
class EncodedSequence:
    H: torch.Tensor  # (B, T, d_e)
    F_u: torch.Tensor  # (B, d_e), equals H[:, -1]


@dataclass
class IntentState:
    reps: torch.Tensor  # (B, M, d)
    log_weights: torch.Tensor  # (B, M), log P(a_i | u)

    @property
    def weights(self) -> torch.Tensor:
        return self.log_weights.exp()


@dataclass
class DecodeState:
    selected: torch.Tensor  # (B, t) item indices in selection order
    hidden: torch.Tensor  # (B, d_e) tracker state after the last selected item
    log_unsat: torch.Tensor  # (B, M) log probability each intent is still unsatisfied

    @property
    def unsat(self) -> torch.Tensor:
        return self.log_unsat.exp()


@dataclass
class RecommendationList:
    items: torch.Tensor  # (B, N)
    selected_probs: torch.Tensor  # (B, N) renormalized step score of each pick
    log_target_probs: torch.Tensor | None  # (B, N) log p*_t of the ground truth
    intent_weights: torch.Tensor  # (B, M)
    selected_intent_probs: torch.Tensor  # (B, M, N) P(y_t | a_i) for the picks


class IDSR(nn.Module):
    """Sequence encoder, implicit intent mining and intent-aware decoder.

    ``lam`` weighs relevance against intent coverage in the step score; the
    same value is used by the training loss.
    """

    def __init__(
        self,
        n_items: int,
        d_e: int = 100,
        d: int = 100,
        n_intents: int = 3,
        dropout: float = 0.1,
        lam: float = 0.5,
    ):
        super().__init__()
        if d != d_e:
            raise ValueError(f"intent size d ({d}) must equal embedding size d_e ({d_e})")
        if n_intents < 1:
            raise ValueError("need at least one intent")
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        self.n_items = n_items
        self.d_e = d_e
        self.d = d
        self.n_intents = n_intents
        self.lam = float(lam)
        self.item_embeddings = nn.Parameter(torch.empty(n_items, d_e))
        self.encoder = GRUEncoder(d_e, d_e)
        self.W_Q = nn.Parameter(torch.empty(n_intents, d_e, d))
        self.W_K = nn.Parameter(torch.empty(n_intents, d_e, d))
        self.W_V = nn.Parameter(torch.empty(n_intents, d_e, d))
        self.tracker = GRUEncoder(d_e, d_e)
        self.W_y = nn.Parameter(torch.empty(d_e, d))
        self.dropout = nn.Dropout(dropout)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for p in self.parameters():
            xavier_uniform_(p, generator)

    def _embed(self, items: torch.Tensor) -> torch.Tensor:
        if items.numel() and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items})")
        return self.dropout(self.item_embeddings[items])

    def encode_sequence(self, items: torch.Tensor) -> EncodedSequence:
        if items.dim() != 2 or items.shape[1] == 0:
            raise ValueError("expected a non-empty (B, T) item tensor")
        H = self.encoder(self._embed(items))
        return EncodedSequence(H, H[:, -1])

    def mine_intents(self, enc: EncodedSequence) -> IntentState:
        q = torch.einsum("be,med->bmd", enc.F_u, self.W_Q)
        k = torch.einsum("bte,med->bmtd", enc.H, self.W_K)
        v = torch.einsum("bte,med->bmtd", enc.H, self.W_V)
        att = torch.softmax(torch.einsum("bmd,bmtd->bmt", q, k) / math.sqrt(self.d), dim=-1)
        reps = torch.einsum("bmt,bmtd->bmd", att, v)
        log_weights = torch.log_softmax(torch.einsum("bd,bmd->bm", enc.F_u, reps), dim=-1)
        return IntentState(reps, log_weights)

    def relevance_logits(self, F_u: torch.Tensor) -> torch.Tensor:
        return F_u @ self.item_embeddings.T

    def relevance_scores(self, F_u: torch.Tensor) -> torch.Tensor:
        """P(v | u, S_u), softmax over all items."""
        return torch.softmax(self.relevance_logits(F_u), dim=-1)

    def intent_scores(self, reps: torch.Tensor) -> torch.Tensor:
        """P(v | a_i) for every intent: (B, M, d) -> (B, M, V)."""
        return torch.softmax(reps @ self.item_embeddings.T, dim=-1)

    def log_unsat_weights(self, hidden: torch.Tensor, reps: torch.Tensor) -> torch.Tensor:
        logits = -torch.einsum("be,ed,bmd->bm", hidden, self.W_y, reps)
        return torch.log_softmax(logits, dim=-1)

    def unsat_weights(self, hidden: torch.Tensor, reps: torch.Tensor) -> torch.Tensor:
        """W(R, a_i): softmax over intents of -h^y W_y F^i."""
        return self.log_unsat_weights(hidden, reps).exp()

    def init_state(self, intents: IntentState) -> DecodeState:
        B = intents.reps.shape[0]
        hidden = intents.reps.new_zeros(B, self.d_e)
        selected = torch.zeros(B, 0, dtype=torch.long, device=hidden.device)
        return DecodeState(selected, hidden, self.log_unsat_weights(hidden, intents.reps))

    def advance_tracker(self, state: DecodeState, new_items: torch.Tensor, intents: IntentState) -> DecodeState:
        if (state.selected == new_items[:, None]).any():
            raise ValueError("item already selected")
        hidden = self.tracker.step(self._embed(new_items), state.hidden)
        selected = torch.cat([state.selected, new_items[:, None]], dim=1)
        return DecodeState(selected, hidden, self.log_unsat_weights(hidden, intents.reps))

    @staticmethod
    def combined_scores(lam, rel, intents: IntentState, intent_dists, state: DecodeState) -> torch.Tensor:
        """Step score over all items; already selected items are zeroed out.

        S(v) = lam * P(v|u) + (1 - lam) * sum_i P(a_i|u) P(v|a_i) W(R, a_i)
        """
        div = torch.einsum("bm,bmv->bv", intents.weights * state.unsat, intent_dists)
        scores = lam * rel + (1 - lam) * div
        if state.selected.shape[1]:
            scores = scores.scatter(1, state.selected, 0.0)
        return scores

    def generate_list(
        self,
        items: torch.Tensor,
        n: int,
        targets: torch.Tensor | None = None,
        lam: float | None = None,
        selections: torch.Tensor | None = None,
    ) -> RecommendationList:
        """Greedy decoding of ``n`` distinct items per row.

        With ``targets`` the per-step log p*_t of the ground truth is kept for
        the loss. ``selections`` replays a fixed item order instead of argmax.
        Argmax ties go to the smallest item index.
        """
        lam = self.lam if lam is None else float(lam)
        if n > self.n_items:
            raise ValueError(f"list length {n} exceeds item count {self.n_items}")
        enc = self.encode_sequence(items)
        intents = self.mine_intents(enc)
        rel_logits = self.relevance_logits(enc.F_u)
        log_rel = torch.log_softmax(rel_logits, dim=-1)
        log_int = torch.log_softmax(intents.reps @ self.item_embeddings.T, dim=-1)
        rel, intent_dists = log_rel.exp(), log_int.exp()
        state = self.init_state(intents)

        # the loop only needs the argmax and the tracker; every quantity the
        # loss differentiates is gathered afterwards in one pass
        used = torch.zeros_like(rel, dtype=torch.bool)
        picks, log_mixes = [], []
        for t in range(n):
            log_mixes.append(intents.log_weights + state.log_unsat)
            if selections is not None:
                pick = selections[:, t]
                if used.gather(1, pick[:, None]).any():
                    raise ValueError("item already selected")
            else:
                with torch.no_grad():
                    scores = self.combined_scores(lam, rel, intents, intent_dists, state)
                    scores.masked_fill_(used, -math.inf)
                    pick = scores.argmax(dim=-1)
            used = used.scatter(1, pick[:, None], True)
            picks.append(pick)
            if t + 1 < n:
                state = self.advance_tracker(state, pick, intents)

        chosen = torch.stack(picks, dim=1)
        log_mix = torch.stack(log_mixes, dim=2)  # (B, M, N)
        cols = chosen if targets is None else torch.cat([chosen, targets[:, None]], dim=1)
        g_rel = log_rel.gather(1, cols)
        g_int = log_int.gather(2, cols[:, None, :].expand(-1, self.n_intents, -1))
        rel_rem = log_remaining_mass(log_rel, g_rel[:, :n], chosen)
        int_rem = log_remaining_mass(log_int, g_int[:, :, :n], chosen)
        log_total = mix_log_scores(lam, rel_rem, int_rem, log_mix)
        log_sel = mix_log_scores(lam, g_rel[:, :n], g_int[:, :, :n], log_mix) - log_total
        log_target = None
        if targets is not None:
            B = chosen.shape[0]
            log_target = mix_log_scores(lam, g_rel[:, n:].expand(B, n), g_int[:, :, n:], log_mix) - log_total
            # p*_t is 0 once the target has been listed at an earlier step
            hit = chosen == targets[:, None]
            gone = (torch.cumsum(hit.long(), dim=1) - hit.long()).bool()
            log_target = log_target.masked_fill(gone, -math.inf)
        return RecommendationList(
            items=chosen,
            selected_probs=log_sel.exp(),
            log_target_probs=log_target,
            intent_weights=intents.weights,
            selected_intent_probs=g_int[:, :, :n].exp(),
        )

    @torch.no_grad()
    def recommend(self, items: torch.Tensor, n: int) -> torch.Tensor:
        return self.generate_list(items, n).items

    def training_loss(self, items: torch.Tensor, targets: torch.Tensor, n: int):
        out = self.generate_list(items, n, targets=targets)
        return batch_idp_loss(self.lam, out, targets)

    def meta(self) -> dict:
        return {
            "model": "idsr",
            "n_items": self.n_items,
            "d_e": self.d_e,
            "d": self.d,
            "n_intents": self.n_intents,
            "lam": self.lam,
            "dropout": self.dropout.p,
        }
