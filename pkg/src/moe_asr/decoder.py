"""Attention decoder: autoregressive transformer over encoder output.

One main decoder serves inference (rescoring); auxiliary copies attached to
intermediate encoder taps contribute train-only losses. The shared
start/end symbol is the last vocabulary id; teacher forcing feeds
[sos] + tokens and scores tokens + [eos].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    causal_mask,
    normal_init,
    sinusoidal_positions,
)
from .tensor import Tensor


class DecoderBlock(Module):
    """Pre-norm: causal self-attention, cross-attention, feed-forward."""

    def __init__(self, d, d_ff, heads, dropout=0.0):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.dropout1 = Dropout(dropout)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.dropout2 = Dropout(dropout)
        self.ffn = FeedForward(d, d_ff, dropout)

    def forward(self, x, enc, mask):
        h = self.norm1.forward(x)
        x = T.add(x, self.dropout1.forward(self.self_attn.forward(h, h, mask)))
        h = self.norm2.forward(x)
        x = T.add(x, self.dropout2.forward(self.cross_attn.forward(h, enc)))
        return T.add(x, self.ffn.forward(x))


class TransformerDecoder(Module):
    def __init__(self, vocab_size, d, d_ff, heads, num_blocks, dropout=0.0):
        super().__init__()
        self.vocab_size = vocab_size
        self.sos_eos = vocab_size - 1
        self.embed = Parameter((vocab_size, d), normal_init(1.0 / np.sqrt(d)))
        self.dropout = Dropout(dropout)
        self.blocks = [DecoderBlock(d, d_ff, heads, dropout) for _ in range(num_blocks)]
        self.norm_out = LayerNorm(d)
        self.out = Linear(d, vocab_size)

    def decode_teacher_forced(self, enc, tokens):
        """Per-position log-distributions, [len(tokens)+1 x V]; row t
        conditions on sos plus tokens[0..t) and the full encoder output."""
        tokens = [int(t) for t in tokens]
        if any(t < 0 or t >= self.vocab_size for t in tokens):
            raise ValueError(f"token id outside vocabulary of {self.vocab_size}: {tokens}")
        ids = np.array([self.sos_eos] + tokens, dtype=np.int64)
        x = T.embedding_lookup(self.embed, ids)
        x = T.add(x, Tensor(sinusoidal_positions(ids.shape[0], x.data.shape[1])))
        x = self.dropout.forward(x)
        mask = causal_mask(ids.shape[0])
        for block in self.blocks:
            x = block.forward(x, enc, mask)
        return T.log_softmax_last(self.out.forward(self.norm_out.forward(x)))


def aed_loss(log_probs, tokens, label_smoothing=0.0):
    """Mean smoothed cross-entropy of tokens + [eos] against the rows.

    The smoothed target mixes (1-eps) of the true one-hot with eps of the
    uniform distribution over the vocabulary.
    """
    vocab = log_probs.data.shape[1]
    targets = np.array([int(t) for t in tokens] + [vocab - 1], dtype=np.int64)
    if log_probs.data.shape[0] != targets.shape[0]:
        raise T.ShapeMismatch("aed-loss", log_probs.data.shape, targets.shape)
    nll = T.scale(T.reduce_mean(T.gather_last(log_probs, targets)), -1.0)
    if label_smoothing == 0.0:
        return nll
    uniform = T.scale(T.reduce_mean(T.reduce_sum(log_probs, axis=1)), -1.0 / vocab)
    return T.add(
        T.scale(nll, 1.0 - label_smoothing), T.scale(uniform, label_smoothing)
    )


class MissingTap(KeyError):
    """An auxiliary decoder's configured encoder depth was not recorded."""


def multi_level_aed(main_decoder, aux_decoders, enc_output, tokens, tap_indices, label_smoothing=0.0):
    """Sum of per-level teacher-forced losses: the main decoder on the final
    encoder output plus one auxiliary decoder per intermediate tap.

    Returns (total, per-level values) with levels ordered shallow to deep,
    main decoder last.
    """
    if len(aux_decoders) != len(tap_indices):
        raise ValueError(
            f"{len(aux_decoders)} auxiliary decoders but {len(tap_indices)} tap depths"
        )
    losses = []
    for decoder, tap in zip(aux_decoders, tap_indices):
        if tap not in enc_output.taps:
            raise MissingTap(f"encoder depth {tap} was not recorded as a tap")
        lp = decoder.decode_teacher_forced(enc_output.taps[tap], tokens)
        losses.append(aed_loss(lp, tokens, label_smoothing))
    lp = main_decoder.decode_teacher_forced(enc_output.final, tokens)
    losses.append(aed_loss(lp, tokens, label_smoothing))
    total = losses[0]
    for term in losses[1:]:
        total = T.add(total, term)
    return total, losses


def rescore(decoder, enc, tokens):
    """Teacher-forced log-probability of a hypothesis plus its end symbol.

    Pure scoring: runs without graph recording. An empty hypothesis scores
    log P(eos | sos, encoder output).
    """
    with T.no_grad():
        lp = decoder.decode_teacher_forced(enc, tokens)
        targets = np.array([int(t) for t in tokens] + [decoder.sos_eos], dtype=np.int64)
        return float(lp.data[np.arange(targets.shape[0]), targets].sum())
