"""Top-1 expert routing and its auxiliary losses.

A router maps each frame's concatenated (shared embedding, hidden state)
pair to a softmax over experts; only the argmax expert runs, and its output
is scaled by the winning probability so the routing decision stays on the
gradient path. The sparsity and mean-importance losses below act on the
full router distributions accumulated over a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import FeedForward, Module, Parameter, uniform_init


@dataclass
class RoutingRecord:
    """Routing outcome for one utterance through one routed layer.

    ``p`` stays in the computation graph (the batch losses read it);
    ``selected`` and ``gates`` are plain arrays for instrumentation.
    """

    p: object
    selected: np.ndarray
    gates: np.ndarray

    @property
    def frames(self):
        return self.selected.shape[0]

    def utilization(self, n_experts):
        """Frame count per expert, length n_experts."""
        return np.bincount(self.selected, minlength=n_experts)


class Router(Module):
    """Linear route scores r = W_r . concat(e_c, o_prev), no bias."""

    def __init__(self, d_emb, d_att, n_experts):
        super().__init__()
        self.n_experts = n_experts
        self.weight = Parameter((d_emb + d_att, n_experts), uniform_init(d_emb + d_att))

    def route(self, e_c, o_prev):
        if e_c.data.shape[0] != o_prev.data.shape[0]:
            raise T.ShapeMismatch("route", e_c.data.shape, o_prev.data.shape)
        logits = T.matmul(T.concat_last([e_c, o_prev]), self.weight)
        p = T.softmax_last(logits)
        # np.argmax takes the first maximum, i.e. ties break to lowest index.
        selected = np.argmax(p.data, axis=-1)
        gates = p.data[np.arange(selected.shape[0]), selected].copy()
        return RoutingRecord(p=p, selected=selected, gates=gates)


class RoutedFFN(Module):
    """The second macaron FFN slot: dense, or dispatched across experts.

    Dense mode (router None) still stores its single FFN under
    ``experts.0`` so parameter names line up exactly with a one-expert
    routed model.
    """

    def __init__(self, d, d_ff, n_experts=1, d_emb=None, dropout=0.0, routed=False):
        super().__init__()
        self.router = Router(d_emb, d, n_experts) if routed else None
        self.experts = [FeedForward(d, d_ff, dropout) for _ in range(n_experts if routed else 1)]
        self.last_record = None

    def forward(self, x, e_c=None, frozen_selected=None):
        """Returns (output, RoutingRecord or None).

        ``frozen_selected`` pins the per-frame expert choice (gates are
        still computed from the live router) so gradient checks can hold the
        discrete decision fixed while probabilities stay differentiable.
        """
        if self.router is None:
            self.last_record = None
            return self.experts[0].forward(x), None
        if e_c is None:
            raise ValueError("routed layer requires the shared embedding e_c")
        record = self.router.route(e_c, x)
        if frozen_selected is not None:
            selected = np.asarray(frozen_selected, dtype=np.int64)
            record = RoutingRecord(
                p=record.p,
                selected=selected,
                gates=record.p.data[np.arange(selected.shape[0]), selected].copy(),
            )
        frames = record.frames
        pieces = []
        for expert_idx in np.unique(record.selected):
            rows = np.nonzero(record.selected == expert_idx)[0]
            out_rows = self.experts[int(expert_idx)].forward(T.embedding_lookup(x, rows))
            pieces.append(T.scatter_rows(out_rows, rows, frames))
        y = pieces[0]
        for piece in pieces[1:]:
            y = T.add(y, piece)
        gates = T.reshape(T.gather_last(record.p, record.selected), (frames, 1))
        self.last_record = record
        return T.mul(y, gates), record


def sparsity_loss(P):
    """Mean over frames of the L1 norm of the L2-unit-normalized rows.

    One-hot rows give the minimum 1; uniform rows give the maximum sqrt(n).
    """
    if P.data.shape[0] == 0:
        raise ValueError("sparsity loss needs at least one frame")
    row_l1 = T.reduce_sum(P, axis=1)
    row_l2 = T.power(T.reduce_sum(T.mul(P, P), axis=1), 0.5)
    return T.reduce_mean(T.mul(row_l1, T.power(row_l2, -1.0)))


def mean_importance_loss(P, n_experts):
    """n times the sum of squared per-expert mean probabilities.

    Uniform column means give the minimum 1; total collapse onto one expert
    gives the maximum n.
    """
    if P.data.shape[0] == 0:
        raise ValueError("mean importance loss needs at least one frame")
    m = T.reduce_mean(P, axis=0)
    return T.scale(T.reduce_sum(T.mul(m, m)), float(n_experts))


def moe_loss(L_s, L_m, L_e, alpha, beta, gamma):
    """Weighted auxiliary objective: alpha*L_s + beta*L_m + gamma*L_e.

    Terms may be graph tensors or plain floats; a zero-weighted term may be
    passed as None and contributes nothing.
    """
    total = T.Tensor(0.0)
    for weight, term in ((alpha, L_s), (beta, L_m), (gamma, L_e)):
        if term is None:
            if weight != 0.0:
                raise ValueError("a weighted loss term is missing")
            continue
        term = term if isinstance(term, T.Tensor) else T.Tensor(float(term))
        total = T.add(total, T.scale(term, weight))
    return total


def batch_distributions(records):
    """Stack per-utterance router distributions of one layer into the
    batch matrix p_ij (rows = frames across the whole batch)."""
    if not records:
        raise ValueError("no routing records to aggregate")
    return T.concat_rows([r.p for r in records])


def utilization_entropy(counts):
    """Shannon entropy (nats) of an expert-utilization histogram."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    q = counts[counts > 0] / total
    return float(-(q * np.log(q)).sum())
