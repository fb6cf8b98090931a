"""Comparison systems sharing the GenMC backbone.

* ``t2t-vanilla``: joint question+options input, the decoder emits the option ID.
* ``t2t-enc``: encoder-only pair scoring with an MLP; the decoder is never used.
* ``weak-clue``: GenMC trained on the reader loss alone (see :class:`GenMC`).
* ``token-clue``: a separately trained generator whose decoded clue *text* is
  spliced into the encoder input of a fresh pair scorer.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .data import (DELIM, OPTION_IDS, Batch, MCQAExample, Vocab, answer_target, make_batch,
                   pad)
from .model import (GenMC, LossBundle, Scorer, argmax_first, gen_loss_from_logits, genmc_params,
                    option_scores, pool_mask, read_loss_from_scores)
from .tensor import Tensor
from .transformer import (EOS, ConfigError, EncoderDecoder, ModelConfig, Module, backbone_params)


class PipelineError(RuntimeError):
    pass


class BaselineKind(str, enum.Enum):
    GENMC = "genmc"
    T2T_VANILLA = "t2t-vanilla"
    T2T_ENC = "t2t-enc"
    WEAK_CLUE = "weak-clue"
    TOKEN_CLUE = "token-clue"


class T2TVanilla(Module):
    """Encoder reads ``name DELIM Q DELIM (A) O_1 (B) O_2 ...``; decoder emits an option ID.

    Prediction is the argmax of the first-step distribution restricted to the
    example's own ID tokens, so it is always a valid option.  With
    ``target="text"`` the decoder is trained on the answer text instead and
    prediction picks the option with the highest mean token log-likelihood.
    """

    kind = "t2t-vanilla"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, target: str = "id"):
        if target not in ("id", "text"):
            raise ConfigError(f"unknown t2t target {target!r}")
        self.cfg = cfg
        self.backbone = EncoderDecoder(cfg, rng)
        self.target = target

    def trainable_named_parameters(self):
        return list(self.named_parameters())

    def decoder_parameter_names(self) -> list[str]:
        return self.backbone.decoder_parameter_names("backbone.")

    def parameter_groups(self) -> dict[str, int]:
        dec = set(self.decoder_parameter_names())
        g = {"encoder": 0, "decoder": 0, "embedding": 0}
        for n, p in self.named_parameters():
            key = "decoder" if n in dec else "embedding" if n == "backbone.embed" else "encoder"
            g[key] += p.size
        return g

    def joint_input(self, ex: MCQAExample, vocab: Vocab) -> list[int]:
        if ex.n_options > len(OPTION_IDS):
            raise ConfigError(f"{ex.n_options} options exceed the {len(OPTION_IDS)} option IDs")
        head = vocab.encode(ex.dataset_name) + [DELIM] if ex.dataset_name else []
        opts: list[int] = []
        for i, o in enumerate(ex.options):
            opts += [OPTION_IDS[i]] + vocab.encode(o)
        q = vocab.encode(ex.question)
        budget = self.cfg.max_source_len
        room = max(0, budget - len(head) - 1 - len(opts))
        return (head + q[:room] + [DELIM] + opts)[:budget]

    def prepare(self, examples: list[MCQAExample], vocab: Vocab) -> Batch:
        ids, mask = pad([self.joint_input(ex, vocab) for ex in examples])
        if self.target == "id":
            targets = [[OPTION_IDS[ex.answer_index], EOS] for ex in examples]
            batch = Batch(list(examples), np.array([ex.answer_index for ex in examples]))
        else:
            batch = make_batch(examples, vocab, self.cfg.max_source_len, self.cfg.max_target_len)
            targets = [answer_target(vocab.encode(ex.answer), self.cfg.max_target_len)
                       for ex in examples]
        batch.q_ids, batch.q_mask = ids, mask
        batch.target_ids, batch.target_mask = pad(targets)
        n_max = max(ex.n_options for ex in examples)
        batch.option_mask = np.array([[i < ex.n_options for i in range(n_max)] for ex in examples])
        return batch

    def losses(self, batch: Batch) -> LossBundle:
        mem = self.backbone.encode(batch.q_ids, batch.q_mask)
        logits = self.backbone.teacher_forced_logits(mem, batch.q_mask, batch.target_ids)
        return LossBundle.of(gen=gen_loss_from_logits(logits, batch.target_ids, batch.target_mask))

    def option_logits(self, batch: Batch) -> np.ndarray:
        """First-step logits over each example's option-ID tokens, ``[B, n]`` (-inf padded)."""
        with T.no_grad():
            mem = self.backbone.encode(batch.q_ids, batch.q_mask)
            probs, h = self.backbone.decoder_step(np.full(len(batch), 1), self.backbone.new_cache(),
                                                  mem, batch.q_mask)
            logits = self.backbone.logits(h).data
        n = batch.option_mask.shape[1]
        out = logits[:, list(OPTION_IDS[:n])]
        return np.where(batch.option_mask, out, -np.inf)

    def text_scores(self, batch: Batch, vocab: Vocab) -> np.ndarray:
        out = np.full(batch.option_mask.shape, -np.inf)
        with T.no_grad():
            mem = self.backbone.encode(batch.q_ids, batch.q_mask)
            for i, ex in enumerate(batch.examples):
                for j, o in enumerate(ex.options):
                    tgt, tmask = pad([answer_target(vocab.encode(o), self.cfg.max_target_len)])
                    lp = T.log_softmax(self.backbone.teacher_forced_logits(
                        T.index(mem, slice(i, i + 1)), batch.q_mask[i:i + 1], tgt)).data[0]
                    out[i, j] = lp[np.arange(tgt.shape[1]), tgt[0]].mean()
        return out

    def predict(self, batch: Batch, vocab: Vocab | None = None) -> np.ndarray:
        if self.target == "text":
            if vocab is None:
                raise ValueError("text-target prediction needs the vocabulary")
            return argmax_first(self.text_scores(batch, vocab))
        return argmax_first(self.option_logits(batch))


class T2TEnc(Module):
    """Max-pooled encoder states of each ``Q DELIM O_i`` pair scored by a 2-layer MLP."""

    kind = "t2t-enc"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = EncoderDecoder(cfg, rng)
        self.scorer = Scorer(cfg.d_model, cfg.d_model, rng)
        self.clues: dict[str, list[int]] | None = None

    def trainable_named_parameters(self):
        return list(self.named_parameters())

    def decoder_parameter_names(self) -> list[str]:
        return self.backbone.decoder_parameter_names("backbone.")

    def parameter_groups(self) -> dict[str, int]:
        dec = set(self.decoder_parameter_names())
        g = {"encoder": 0, "decoder": 0, "embedding": 0, "reader": 0}
        for n, p in self.named_parameters():
            if n in dec:
                g["decoder"] += p.size
            elif n == "backbone.embed":
                g["embedding"] += p.size
            elif n.startswith("backbone."):
                g["encoder"] += p.size
            else:
                g["reader"] += p.size
        return g

    def prepare(self, examples: list[MCQAExample], vocab: Vocab) -> Batch:
        return make_batch(examples, vocab, self.cfg.max_source_len, self.cfg.max_target_len,
                          clues=self.clues)

    def scores(self, batch: Batch) -> Tensor:
        b, n, length = batch.pair_ids.shape
        mask = batch.pair_mask.reshape(b * n, length)
        h = self.backbone.encode(batch.pair_ids.reshape(b * n, length), mask)
        return option_scores(self.scorer(T.max_pool_time(h, pool_mask(mask))), batch.option_mask)

    def losses(self, batch: Batch) -> LossBundle:
        return LossBundle.of(read=read_loss_from_scores(self.scores(batch), batch.answers))

    def predict(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            return argmax_first(self.scores(batch).data)


class ClueGenerator(Module):
    """Question -> answer-text generator trained with the teacher-forced loss only."""

    kind = "clue-generator"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, clue_max_len: int | None = None):
        self.cfg = cfg
        self.backbone = EncoderDecoder(cfg, rng)
        self.clue_max_len = clue_max_len or cfg.max_target_len

    def trainable_named_parameters(self):
        return list(self.named_parameters())

    def prepare(self, examples, vocab):
        return make_batch(examples, vocab, self.cfg.max_source_len, self.cfg.max_target_len)

    def losses(self, batch: Batch) -> LossBundle:
        mem = self.backbone.encode(batch.q_ids, batch.q_mask)
        logits = self.backbone.teacher_forced_logits(mem, batch.q_mask, batch.target_ids)
        return LossBundle.of(gen=gen_loss_from_logits(logits, batch.target_ids, batch.target_mask))

    def clues(self, batch: Batch) -> list[list[int]]:
        with T.no_grad():
            mem = self.backbone.encode(batch.q_ids, batch.q_mask)
            return self.backbone.greedy_decode(mem, batch.q_mask, self.clue_max_len)[0]

    def predict(self, batch: Batch) -> np.ndarray:
        """1 where the decoded clue equals the answer tokens exactly, else 0 (see ``answers``)."""
        clues = self.clues(batch)
        out = np.zeros(len(batch), dtype=np.int64)
        for i, c in enumerate(clues):
            gold = [int(t) for t, m in zip(batch.target_ids[i], batch.target_mask[i])
                    if m and t != EOS]
            out[i] = int(c == gold)
        return np.where(out == 1, batch.answers, -1)


class TokenClue:
    """Two-stage pipeline: a frozen :class:`ClueGenerator` feeding clue text to a :class:`T2TEnc`."""

    kind = "token-clue"

    def __init__(self, generator: ClueGenerator | None, reader: T2TEnc):
        self.generator = generator
        self.reader = reader
        self.cfg = reader.cfg

    def attach_clues(self, examples: list[MCQAExample], vocab: Vocab, batch_size: int = 64) -> None:
        if self.generator is None:
            raise PipelineError("token-clue reader needs a trained stage-1 generator")
        clues = dict(self.reader.clues or {})
        todo = [ex for ex in examples if ex.id not in clues]
        for s in range(0, len(todo), batch_size):
            chunk = todo[s:s + batch_size]
            batch = self.generator.prepare(chunk, vocab)
            for ex, c in zip(chunk, self.generator.clues(batch)):
                clues[ex.id] = c
        self.reader.clues = clues

    def prepare(self, examples, vocab):
        self.attach_clues(examples, vocab)
        return self.reader.prepare(examples, vocab)

    def losses(self, batch):
        return self.reader.losses(batch)

    def predict(self, batch):
        return self.reader.predict(batch)

    def named_parameters(self):
        return self.reader.named_parameters()

    def trainable_named_parameters(self):
        return self.reader.trainable_named_parameters()

    def parameters(self):
        return self.reader.parameters()

    def num_parameters(self) -> int:
        gen = self.generator.num_parameters() if self.generator is not None else 0
        return gen + self.reader.num_parameters()

    def parameter_groups(self) -> dict[str, int]:
        g = {f"reader.{k}": v for k, v in self.reader.parameter_groups().items()}
        if self.generator is not None:
            g["generator"] = self.generator.num_parameters()
        return g

    def train(self, mode=True, rng=None):
        self.reader.train(mode, rng)
        return self

    def eval(self):
        self.reader.eval()
        if self.generator is not None:
            self.generator.eval()
        return self


def build_model(kind: str, cfg: ModelConfig, seed: int, clue_max_len: int | None = None,
                t2t_target: str = "id"):
    """Fresh model of the given kind, initialised from ``seed``."""
    kind = BaselineKind(kind).value
    rng = np.random.default_rng(seed)
    if kind == "genmc":
        return GenMC(cfg, rng, clue_max_len=clue_max_len)
    if kind == "weak-clue":
        return GenMC(cfg, rng, read_only=True, clue_max_len=clue_max_len)
    if kind == "t2t-vanilla":
        return T2TVanilla(cfg, rng, target=t2t_target)
    if kind == "t2t-enc":
        return T2TEnc(cfg, rng)
    return TokenClue(None, T2TEnc(cfg, rng))


def expected_param_count(kind: str, cfg: ModelConfig) -> int:
    """Closed-form parameter count per model kind (token-clue counts both stages)."""
    d = cfg.d_model
    scorer = d * d + d + d + 1
    kind = BaselineKind(kind).value
    if kind in ("genmc", "weak-clue"):
        return genmc_params(cfg)
    if kind == "t2t-vanilla":
        return backbone_params(cfg)
    if kind == "t2t-enc":
        return backbone_params(cfg) + scorer
    return 2 * backbone_params(cfg) + scorer
