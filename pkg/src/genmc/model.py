"""GenMC: clue generator, clue fusion, dual-attention reader and the joint loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Batch, MCQAExample, Vocab, make_batch
from .tensor import Tensor
from .transformer import (EncoderDecoder, EncoderLayer, LayerNorm, Linear, ModelConfig,
                          Module, key_mask)


@dataclass
class LossBundle:
    gen: Tensor
    read: Tensor
    total: Tensor

    @classmethod
    def of(cls, gen: Tensor | None = None, read: Tensor | None = None) -> "LossBundle":
        zero = T.Tensor(0.0)
        gen = zero if gen is None else gen
        read = zero if read is None else read
        return cls(gen, read, gen + read)


@dataclass
class ForwardState:
    """Intermediate values of one GenMC forward pass over a batch.

    Shapes are token-major: ``H_Q[B, |Q|, d]``, ``H_QC[B, |Q|+|C|, d]``,
    ``H_QO[B, n, L, d]``; scores ``[B, n]``.
    """

    H_Q: Tensor
    clue_ids: list[list[int]]
    H_C: np.ndarray
    H_QC: Tensor
    H_QO: Tensor
    Hhat_QO: Tensor
    Hhat_QC: Tensor
    f_QO: Tensor
    f_QC: Tensor
    scores: Tensor
    predicted: np.ndarray


def argmax_first(scores: np.ndarray) -> np.ndarray:
    return np.asarray(scores).argmax(axis=-1)


class DualAttention(Module):
    """Cross-attention in both directions between option-pair and clue-question states.

    ``S = H_QO H_QC^T / sqrt(d)``; each side attends over the other, the
    result goes through its own projection and is added back residually
    under layer norm.
    """

    def __init__(self, d: int, rng):
        self.proj_qo = Linear(d, d, rng)
        self.norm_qo = LayerNorm(d)
        self.proj_qc = Linear(d, d, rng)
        self.norm_qc = LayerNorm(d)
        self.last_weights: tuple[np.ndarray, np.ndarray] | None = None

    def __call__(self, h_qo: Tensor, h_qc: Tensor, qo_mask: np.ndarray,
                 qc_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        if h_qo.shape[-1] != h_qc.shape[-1]:
            raise T.ShapeError(f"dual attention: widths {h_qo.shape} and {h_qc.shape} differ")
        d = h_qo.shape[-1]
        s = T.matmul(h_qo, T.transpose(h_qc)) * (1.0 / math.sqrt(d))
        a_qo = T.softmax(T.add_constant(s, key_mask(qc_mask)[:, 0]), axis=-1)
        a_qc = T.softmax(T.add_constant(T.transpose(s), key_mask(qo_mask)[:, 0]), axis=-1)
        self.last_weights = (a_qo.data, a_qc.data)
        hat_qo = self.norm_qo(h_qo + self.proj_qo(T.matmul(a_qo, h_qc)))
        hat_qc = self.norm_qc(h_qc + self.proj_qc(T.matmul(a_qc, h_qo)))
        return hat_qo, hat_qc


class Scorer(Module):
    """Two-layer MLP producing one logit per row."""

    def __init__(self, d_in: int, d_hidden: int, rng):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(T.relu(self.hidden(x)))


def pool_mask(mask: np.ndarray) -> np.ndarray:
    """Additive ``[..., L, 1]`` mask for :func:`max_pool_time` from boolean ``[..., L]``."""
    return np.where(mask, 0.0, T.NEG_INF)[..., None]


def option_scores(flat: Tensor, option_mask: np.ndarray) -> Tensor:
    """Reshape per-pair logits ``[B*n, 1]`` to ``[B, n]`` with placeholder options masked."""
    b, n = option_mask.shape
    return T.add_constant(T.reshape(flat, (b, n)), np.where(option_mask, 0.0, T.NEG_INF))


def gen_loss_from_logits(logits: Tensor, targets: np.ndarray, target_mask: np.ndarray) -> Tensor:
    """Per-example mean token NLL of ``targets``, averaged over the batch."""
    b, m, v = logits.shape
    lengths = target_mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("generation target is empty after truncation")
    w = (target_mask / lengths[:, None] / b).reshape(-1)
    return T.cross_entropy_rows(T.reshape(logits, (b * m, v)), targets.reshape(-1), w)


def read_loss_from_scores(scores: Tensor, answers: np.ndarray) -> Tensor:
    b, n = scores.shape
    a = np.asarray(answers)
    if ((a < 0) | (a >= n)).any():
        raise IndexError(f"answer index out of range for {n} options")
    return T.cross_entropy_rows(scores, a, np.full(b, 1.0 / b))


class GenMC(Module):
    """Generate a clue from the question, fuse it, and score options against it.

    ``read_only=True`` gives the weak-clue variant: only the reader loss is
    optimised and decoder-only parameters are frozen at initialisation.
    """

    kind = "genmc"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, read_only: bool = False,
                 clue_max_len: int | None = None):
        self.cfg = cfg
        self.backbone = EncoderDecoder(cfg, rng)
        self.fusion = EncoderLayer(cfg, rng)
        self.dual = DualAttention(cfg.d_model, rng)
        self.scorer = Scorer(2 * cfg.d_model, cfg.d_model, rng)
        self.read_only = read_only
        self.clue_max_len = clue_max_len or cfg.max_target_len

    # -- parameter groups -----------------------------------------------------------
    def decoder_parameter_names(self) -> list[str]:
        return self.backbone.decoder_parameter_names("backbone.")

    def trainable_named_parameters(self) -> list[tuple[str, Tensor]]:
        frozen = set(self.decoder_parameter_names()) if self.read_only else set()
        return [(n, p) for n, p in self.named_parameters() if n not in frozen]

    def parameter_groups(self) -> dict[str, int]:
        groups = {"encoder": 0, "decoder": 0, "embedding": 0, "fusion": 0, "reader": 0}
        dec = set(self.decoder_parameter_names())
        for n, p in self.named_parameters():
            if n in dec:
                groups["decoder"] += p.size
            elif n == "backbone.embed":
                groups["embedding"] += p.size
            elif n.startswith("backbone."):
                groups["encoder"] += p.size
            elif n.startswith("fusion."):
                groups["fusion"] += p.size
            else:
                groups["reader"] += p.size
        return groups

    # -- pieces ---------------------------------------------------------------------------
    def prepare(self, examples: list[MCQAExample], vocab: Vocab) -> Batch:
        return make_batch(examples, vocab, self.cfg.max_source_len, self.cfg.max_target_len)

    def encode_question(self, batch: Batch) -> Tensor:
        return self.backbone.encode(batch.q_ids, batch.q_mask)

    def generate_clue(self, h_q: Tensor, q_mask: np.ndarray):
        """Greedy clue decode; returns ``(clue_ids, H_C[B, Lc, d], clue_mask)``."""
        return self.backbone.greedy_decode(h_q, q_mask, self.clue_max_len)

    def fuse_clue(self, h_q: Tensor, q_mask: np.ndarray, h_c: np.ndarray,
                  c_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """One encoder layer over ``[H_Q ; detach(H_C)]``."""
        h_c = T.detach(T.Tensor(h_c))
        joint = T.concat_time(h_q, h_c)
        mask = np.concatenate([q_mask, c_mask], axis=1)
        return self.fusion(joint, key_mask(mask)), mask

    def encode_options(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """All question-option pairs through the shared encoder: ``[B*n, L, d]``."""
        b, n, length = batch.pair_ids.shape
        ids = batch.pair_ids.reshape(b * n, length)
        mask = batch.pair_mask.reshape(b * n, length)
        return self.backbone.encode(ids, mask), mask

    def read(self, h_qo: Tensor, qo_mask: np.ndarray, h_qc: Tensor, qc_mask: np.ndarray,
             option_mask: np.ndarray):
        b, n = option_mask.shape
        rep = np.repeat(np.arange(b), n)
        h_qc_rep = T.take(h_qc, rep, axis=0)
        qc_mask_rep = qc_mask[rep]
        hat_qo, hat_qc = self.dual(h_qo, h_qc_rep, qo_mask, qc_mask_rep)
        f_qo = T.max_pool_time(hat_qo, pool_mask(qo_mask))
        f_qc = T.max_pool_time(hat_qc, pool_mask(qc_mask_rep))
        flat = self.scorer(T.concat([f_qo, f_qc], axis=-1))
        return option_scores(flat, option_mask), hat_qo, hat_qc, f_qo, f_qc

    # -- full passes -------------------------------------------------------------------------
    def forward(self, batch: Batch, clue=None) -> ForwardState:
        """Full pass; ``clue`` optionally supplies a precomputed ``generate_clue`` result."""
        h_q = self.encode_question(batch)
        clue_ids, h_c, c_mask = clue if clue is not None else self.generate_clue(h_q, batch.q_mask)
        h_qc, qc_mask = self.fuse_clue(h_q, batch.q_mask, h_c, c_mask)
        h_qo, qo_mask = self.encode_options(batch)
        scores, hat_qo, hat_qc, f_qo, f_qc = self.read(h_qo, qo_mask, h_qc, qc_mask,
                                                       batch.option_mask)
        b, n = batch.option_mask.shape
        return ForwardState(h_q, clue_ids, h_c, h_qc,
                            T.reshape(h_qo, (b, n) + h_qo.shape[1:]),
                            hat_qo, hat_qc, f_qo, f_qc, scores, argmax_first(scores.data))

    def gen_loss(self, h_q: Tensor, batch: Batch) -> Tensor:
        logits = self.backbone.teacher_forced_logits(h_q, batch.q_mask, batch.target_ids)
        return gen_loss_from_logits(logits, batch.target_ids, batch.target_mask)

    def losses(self, batch: Batch, state: ForwardState | None = None, clue=None) -> LossBundle:
        state = self.forward(batch, clue) if state is None else state
        read = read_loss_from_scores(state.scores, batch.answers)
        if self.read_only:
            return LossBundle.of(read=read)
        return LossBundle.of(gen=self.gen_loss(state.H_Q, batch), read=read)

    def predict(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            return self.forward(batch).predicted

    def clues(self, batch: Batch) -> list[list[int]]:
        with T.no_grad():
            h_q = self.encode_question(batch)
            return self.generate_clue(h_q, batch.q_mask)[0]


def genmc_params(cfg: ModelConfig) -> int:
    """Backbone + fusion layer + dual attention (two d->d maps, two norms) + 2d->d->1 scorer."""
    from .transformer import backbone_params, encoder_layer_params
    d = cfg.d_model
    dual = 2 * (d * d + d) + 2 * (2 * d)
    scorer = 2 * d * d + d + d + 1
    return backbone_params(cfg) + encoder_layer_params(cfg) + dual + scorer
