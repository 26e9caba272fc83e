"""CTC: alignment-marginalizing loss, exact-enumeration oracle, greedy
decoding, and prefix beam search for N-best hypotheses.

Conventions: posterior matrices are [T x (V+1)] log-probabilities with
column 0 the blank; the public API speaks data-token ids (0..V-1) and the
+1 class shift stays inside this module. All dynamic programming runs in
log space with -inf as the additive identity.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -np.inf


class InfeasibleLength(ValueError):
    """Label sequence cannot be emitted in the available frames."""


def _lse(values):
    """Log-sum-exp over a 1-D array, safe at all -inf."""
    m = np.max(values)
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(np.sum(np.exp(values - m)))


def min_frames(tokens):
    """Fewest frames that can realize the sequence: one per token plus one
    separating blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def _extended(tokens):
    """Blank-interleaved class sequence: [0, c1, 0, c2, ..., 0]."""
    ext = np.zeros(2 * len(tokens) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(tokens, dtype=np.int64) + 1
    return ext


def _check_inputs(lp, tokens):
    t_frames, classes = lp.shape
    if any(t < 0 or t + 1 >= classes for t in tokens):
        raise ValueError(f"token id out of range for {classes - 1} CTC labels: {tokens}")
    need = min_frames(tokens)
    if t_frames < need:
        raise InfeasibleLength(
            f"{len(tokens)} tokens need at least {need} frames, got {t_frames}"
        )


def ctc_loss(log_probs, tokens):
    """Negative log-probability of `tokens` under the posterior grid.

    Differentiable: the backward pass uses the full forward/backward
    occupancy, so gradients flow to every frame and class.
    """
    tokens = [int(t) for t in tokens]
    is_tensor = isinstance(log_probs, Tensor)
    lp = log_probs.data if is_tensor else np.asarray(log_probs, dtype=np.float64)
    _check_inputs(lp, tokens)
    ext = _extended(tokens)
    t_frames, s_len = lp.shape[0], ext.shape[0]

    # skip[s]: an alignment may jump s-2 -> s (new non-blank distinct from
    # the previous non-blank).
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    emit = lp[:, ext]

    alpha = np.full((t_frames, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(s_len, NEG_INF)
        step[1:] = prev[:-1]
        jump = np.full(s_len, NEG_INF)
        jump[2:] = prev[: s_len - 2]
        jump[~skip] = NEG_INF
        stacked = np.stack([stay, step, jump])
        m = stacked.max(axis=0)
        safe = m != NEG_INF
        tot = np.full(s_len, NEG_INF)
        tot[safe] = m[safe] + np.log(np.exp(stacked[:, safe] - m[safe]).sum(axis=0))
        alpha[t] = tot + emit[t]

    log_z = _lse(alpha[-1, max(s_len - 2, 0) :])
    if log_z == NEG_INF:
        raise InfeasibleLength("no alignment has positive probability")
    loss_value = -log_z

    if not (is_tensor and log_probs.requires_grad):
        return Tensor(loss_value) if is_tensor else loss_value

    beta = np.full((t_frames, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.full(s_len, NEG_INF)
        step[: s_len - 1] = nxt[1:]
        jump = np.full(s_len, NEG_INF)
        jump[: s_len - 2] = nxt[2:]
        fwd_skip = np.zeros(s_len, dtype=bool)
        fwd_skip[: s_len - 2] = skip[2:]
        jump[~fwd_skip] = NEG_INF
        stacked = np.stack([stay, step, jump])
        m = stacked.max(axis=0)
        safe = m != NEG_INF
        tot = np.full(s_len, NEG_INF)
        tot[safe] = m[safe] + np.log(np.exp(stacked[:, safe] - m[safe]).sum(axis=0))
        beta[t] = tot + emit[t]

    def bwd(g):
        # occupancy gamma[t,s] = alpha*beta / emit; d(-logZ)/d lp[t,c] is
        # minus the summed occupancy of states labeled c, normalized by Z.
        grad = np.zeros_like(lp)
        occ = alpha + beta - emit - log_z
        contrib = np.exp(occ)
        for s in range(s_len):
            grad[:, ext[s]] += contrib[:, s]
        return (-float(g) * grad,)

    return T._node(loss_value, (log_probs,), bwd, "ctc-loss")


def _collapse(path):
    """Merge repeats, then drop blanks; classes -> data tokens."""
    out, prev = [], -1
    for c in path:
        if c != prev and c != 0:
            out.append(c - 1)
        prev = c
    return out


def ctc_enumeration_oracle(log_probs, tokens):
    """Brute-force -log P: sum every frame-level path whose collapse equals
    `tokens`. Only viable for tiny grids; guards at 10^6 paths."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    tokens = [int(t) for t in tokens]
    t_frames, classes = lp.shape
    if classes**t_frames > 10**6:
        raise ValueError(f"enumeration over {classes}^{t_frames} paths is too large")
    target = list(tokens)
    scores = [
        sum(lp[t, c] for t, c in enumerate(path))
        for path in itertools.product(range(classes), repeat=t_frames)
        if _collapse(path) == target
    ]
    if not scores:
        raise InfeasibleLength(f"no path of length {t_frames} collapses to {tokens}")
    return -_lse(np.array(scores))


def greedy_decode(log_probs):
    """Best class per frame, repeats merged, blanks dropped."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return _collapse(np.argmax(lp, axis=-1))


@dataclass
class Hypothesis:
    """One N-best entry; aed_score and combined are filled by rescoring."""

    tokens: list
    ctc_score: float
    aed_score: float = field(default=0.0)
    combined: float = field(default=0.0)


def prefix_beam_search(log_probs, beam, nbest):
    """CTC prefix search keeping (blank-ending, nonblank-ending) log masses
    per prefix; returns the top `nbest` distinct prefixes by total mass.

    Ties in total mass break lexicographically on the token sequence so
    results are reproducible.
    """
    if not beam >= nbest >= 1:
        raise ValueError(f"need beam >= nbest >= 1, got beam={beam}, nbest={nbest}")
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_frames, classes = lp.shape

    def total(pair):
        return _lse(np.array(pair))

    beams = {(): (0.0, NEG_INF)}
    for t in range(t_frames):
        frame = lp[t]
        nxt = {}

        def absorb(prefix, p_b, p_nb):
            old_b, old_nb = nxt.get(prefix, (NEG_INF, NEG_INF))
            nxt[prefix] = (
                old_b if p_b == NEG_INF else _lse(np.array([old_b, p_b])),
                old_nb if p_nb == NEG_INF else _lse(np.array([old_nb, p_nb])),
            )

        for prefix, (p_b, p_nb) in beams.items():
            p_total = total((p_b, p_nb))
            absorb(prefix, frame[0] + p_total, NEG_INF)
            for c in range(1, classes):
                p = frame[c]
                if prefix and prefix[-1] == c:
                    # same class again: without a blank it extends the last
                    # emission; after a blank it starts a new token
                    absorb(prefix, NEG_INF, p + p_nb)
                    absorb(prefix + (c,), NEG_INF, p + p_b)
                else:
                    absorb(prefix + (c,), NEG_INF, p + p_total)

        ranked = sorted(nxt.items(), key=lambda kv: (-total(kv[1]), kv[0]))
        beams = dict(ranked[:beam])

    final = sorted(beams.items(), key=lambda kv: (-total(kv[1]), kv[0]))
    return [
        Hypothesis(tokens=[c - 1 for c in prefix], ctc_score=float(total(pair)))
        for prefix, pair in final[:nbest]
    ]
