"""Tokenisation, MCQA dataset I/O and synthetic task generators."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .transformer import BOS, EOS, PAD, UNK

DELIM = 4
OPTION_IDS = tuple(range(5, 13))  # "(A)".."(H)"
OPTION_LABELS = tuple(f"({c})" for c in "ABCDEFGH")
MAX_OPTIONS = len(OPTION_IDS)
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>", "\n") + OPTION_LABELS

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    """Malformed dataset content; ``lineno`` is set when the source is a file."""

    def __init__(self, msg: str, lineno: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{lineno}: " if lineno is not None else f"{path}: "
        elif lineno is not None:
            where = f"line {lineno}: "
        super().__init__(where + msg)
        self.lineno = lineno
        self.path = path


def tokenize(text: str) -> list[str]:
    """Lowercase, split off punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.itos:
                f.write(json.dumps(t) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([json.loads(line) for line in f if line.strip()])


def build_vocab(corpus: Iterable[str], max_size: int | None = None) -> Vocab:
    """Reserved tokens first, then corpus tokens by (frequency desc, token asc)."""
    counts: Counter[str] = Counter()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        counts.update(tokenize(text))
    if n_texts == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max(0, max_size - len(SPECIALS))]
    return Vocab(list(SPECIALS) + [t for t, _ in ranked])


@dataclass
class MCQAExample:
    id: str
    question: str
    options: list[str]
    answer_index: int
    dataset_name: str = ""

    def __post_init__(self):
        n = len(self.options)
        if not 2 <= n <= MAX_OPTIONS:
            raise DataError(f"example {self.id!r}: {n} options, expected 2..{MAX_OPTIONS}")
        if any(not str(o).strip() for o in self.options):
            raise DataError(f"example {self.id!r}: empty option")
        if not 0 <= self.answer_index < n:
            raise DataError(f"example {self.id!r}: answer_idx {self.answer_index} out of range for {n} options")

    @property
    def n_options(self) -> int:
        return len(self.options)

    @property
    def answer(self) -> str:
        return self.options[self.answer_index]

    def to_json(self) -> dict:
        d = {"id": self.id, "question": self.question, "options": list(self.options),
             "answer_idx": self.answer_index}
        if self.dataset_name:
            d["dataset"] = self.dataset_name
        return d


def parse_example(obj, lineno: int | None = None, path: str | None = None) -> MCQAExample:
    if not isinstance(obj, dict):
        raise DataError("expected a JSON object", lineno, path)
    for key in ("id", "question", "options", "answer_idx"):
        if key not in obj:
            raise DataError(f"missing field {key!r}", lineno, path)
    opts = obj["options"]
    if not isinstance(opts, list) or not opts:
        raise DataError("options must be a non-empty list", lineno, path)
    if not all(isinstance(o, str) for o in opts):
        raise DataError("options must be strings", lineno, path)
    idx = obj["answer_idx"]
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise DataError("answer_idx must be an integer", lineno, path)
    try:
        return MCQAExample(str(obj["id"]), str(obj["question"]), list(opts), idx,
                           str(obj.get("dataset", "") or ""))
    except DataError as e:
        raise DataError(str(e), lineno, path) from None


def load_jsonl(path: str | Path) -> list[MCQAExample]:
    """One example per line; blank lines and ``#`` comment lines are skipped."""
    path = str(path)
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                obj = json.loads(s)
            except json.JSONDecodeError as e:
                raise DataError(f"malformed JSON ({e.msg})", lineno, path) from None
            out.append(parse_example(obj, lineno, path))
    return out


def read_header(path: str | Path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
    if first.startswith("#"):
        try:
            return json.loads(first[1:])
        except json.JSONDecodeError:
            return None
    return None


def write_jsonl(path: str | Path, examples: Sequence[MCQAExample], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header is not None:
            f.write("# " + json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            f.write(json.dumps(ex.to_json()) + "\n")


def dump_jsonl(examples: Sequence[MCQAExample], header: dict | None = None) -> str:
    lines = []
    if header is not None:
        lines.append("# " + json.dumps(header, sort_keys=True))
    lines += [json.dumps(ex.to_json()) for ex in examples]
    return "\n".join(lines) + "\n"


# -- synthetic tasks -------------------------------------------------------------------

def _place_answer(rng, answer: str, distractors: list[str]) -> tuple[list[str], int]:
    t = int(rng.integers(len(distractors) + 1))
    opts = list(distractors)
    opts.insert(t, answer)
    return opts, t


def gen_synth_copy(n_examples: int, vocab_size: int, n_options: int, seed: int) -> list[MCQAExample]:
    """Key -> answer lookup through a fixed random bijection.

    ``vocab_size`` symbols are split evenly between key tokens ``k*`` and
    answer tokens ``v*``.  A correct clue is exactly the answer token.
    """
    if n_examples < 1 or vocab_size < 2 or n_options < 2:
        raise ValueError("n_examples, vocab_size and n_options must be positive (options >= 2)")
    n_sym = vocab_size // 2
    if n_options > n_sym or n_options > MAX_OPTIONS:
        raise ValueError(f"{n_options} options need at least that many answer symbols (have {n_sym})")
    rng = np.random.default_rng(seed)
    mapping = rng.permutation(n_sym)
    out = []
    for i in range(n_examples):
        k = int(rng.integers(n_sym))
        ans = int(mapping[k])
        others = [j for j in range(n_sym) if j != ans]
        picks = rng.choice(len(others), size=n_options - 1, replace=False)
        opts, t = _place_answer(rng, f"v{ans}", [f"v{others[j]}" for j in picks])
        out.append(MCQAExample(f"copy-{seed}-{i}", f"what pairs with k{k} ?", opts, t, "copy"))
    return out


@dataclass
class TwoHopWorld:
    """The fixed maps behind the two-hop task: keys -> mids -> answers."""

    n_keys: int
    n_mids: int
    hop1: np.ndarray  # key index -> mid index
    hop2: np.ndarray  # mid index -> answer index
    heldout: frozenset = field(default_factory=frozenset)

    def answer(self, key: int) -> int:
        return int(self.hop2[self.hop1[key]])


def twohop_world(vocab_size: int, seed: int, holdout_fraction: float = 0.2,
                 keys_per_mid: int = 1) -> TwoHopWorld:
    """Random maps over disjoint key / mid / answer ranges.

    ``hop1`` sends exactly ``keys_per_mid`` keys to each mid; ``hop2`` is a
    bijection.  The symbol budget is ``vocab_size`` split as
    ``keys_per_mid : 1 : 1``.
    """
    if keys_per_mid < 1:
        raise ValueError("keys_per_mid must be >= 1")
    n_mids = vocab_size // (keys_per_mid + 2)
    if n_mids < 2:
        raise ValueError(f"vocab_size={vocab_size} too small for disjoint key/mid/answer ranges")
    n_keys = n_mids * keys_per_mid
    rng = np.random.default_rng(seed)
    hop1 = rng.permutation(np.repeat(np.arange(n_mids), keys_per_mid))
    hop2 = rng.permutation(n_mids)
    n_hold = int(round(holdout_fraction * n_keys))
    held = frozenset(int(k) for k in rng.permutation(n_keys)[:n_hold])
    return TwoHopWorld(n_keys, n_mids, hop1, hop2, held)


def gen_synth_twohop(n_examples: int, vocab_size: int, n_options: int, seed: int,
                     part: str = "all", sample_seed: int | None = None,
                     holdout_fraction: float = 0.2, bridge_fraction: float = 0.0,
                     keys_per_mid: int = 1) -> list[MCQAExample]:
    """Questions about key ``k*`` whose answer ``a*`` is reached through a hidden mid ``m*``.

    ``seed`` fixes the maps and the key split; ``sample_seed`` (default:
    ``seed``) draws the examples.  ``part`` selects keys for the two-hop
    questions: ``all``, ``train`` (non-held-out keys) or ``heldout``.

    With ``bridge_fraction > 0`` that share of the examples are one-hop facts
    instead (``k* -> m*`` for every key, held-out ones included, and
    ``m* -> a*`` for every mid).  With ``keys_per_mid > 1`` a held-out key
    shares its mid with training keys, so its two-hop answer is reachable by
    composing a bridge fact with what the training keys teach.
    """
    if part not in ("all", "train", "heldout"):
        raise ValueError(f"unknown part {part!r}")
    if n_examples < 1 or n_options < 2:
        raise ValueError("n_examples must be positive and n_options >= 2")
    if not 0.0 <= bridge_fraction <= 1.0:
        raise ValueError("bridge_fraction must lie in [0, 1]")
    world = twohop_world(vocab_size, seed, holdout_fraction, keys_per_mid)
    if n_options > world.n_mids or n_options > MAX_OPTIONS:
        raise ValueError(f"{n_options} options need at least that many answer symbols (have {world.n_mids})")
    keys = [k for k in range(world.n_keys)
            if part == "all" or (k in world.heldout) == (part == "heldout")]
    # two-hop distractors come from the same part so no answer is novel to one side only
    own_mids = sorted({int(world.hop1[k]) for k in keys})
    if len(own_mids) < n_options:
        raise ValueError(f"part {part!r} reaches {len(own_mids)} mids, fewer than {n_options} options")
    all_mids = range(world.n_mids)
    rng = np.random.default_rng(seed if sample_seed is None else sample_seed)

    def options(correct: int, prefix: str, image, pool) -> tuple[list[str], int]:
        others = [j for j in pool if j != correct]
        picks = rng.choice(len(others), size=n_options - 1, replace=False)
        return _place_answer(rng, f"{prefix}{int(image(correct))}",
                             [f"{prefix}{int(image(others[j]))}" for j in picks])

    out = []
    for i in range(n_examples):
        ex_id = f"twohop-{seed}-{part}-{i}"
        if bridge_fraction and rng.random() < bridge_fraction:
            if rng.random() < 0.5:
                x = int(rng.integers(world.n_keys))
                opts, t = options(int(world.hop1[x]), "m", lambda m: m, all_mids)
                q = f"what lies one step from k{x} ?"
            else:
                x = int(rng.integers(world.n_mids))
                opts, t = options(x, "a", lambda m: world.hop2[m], all_mids)
                q = f"what lies one step from m{x} ?"
            out.append(MCQAExample(ex_id, q, opts, t, "twohop"))
            continue
        k = keys[int(rng.integers(len(keys)))]
        opts, t = options(int(world.hop1[k]), "a", lambda m: world.hop2[m], own_mids)
        out.append(MCQAExample(ex_id, f"what lies two steps from k{k} ?", opts, t, "twohop"))
    return out


# -- batching ----------------------------------------------------------------------------

def pad(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists with PAD; returns ``(ids, mask)`` with mask True at real tokens."""
    n = max([len(s) for s in seqs] + [min_len])
    ids = np.full((len(seqs), n), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def truncate_question(q_ids: list[int], max_len: int) -> list[int]:
    return list(q_ids[:max_len])


def join_pair(q_ids: Sequence[int], o_ids: Sequence[int], max_len: int,
              middle: Sequence[int] = ()) -> list[int]:
    """``Q + DELIM + [middle + DELIM] + O`` cut to ``max_len``, shortening Q first.

    The option is kept whole when it fits, so truncation never hides what is
    being scored.
    """
    mid = [DELIM] + (list(middle) + [DELIM] if middle else [])
    o_ids = list(o_ids)[:max_len]
    room = max_len - len(o_ids) - len(mid)
    if room < 0:
        mid = mid[:max(0, max_len - len(o_ids))]
        room = 0
    return list(q_ids[:room]) + mid + o_ids


def answer_target(o_ids: Sequence[int], max_len: int) -> list[int]:
    """Answer tokens followed by EOS, at most ``max_len`` ids."""
    return list(o_ids)[:max_len - 1] + [EOS]


@dataclass
class Batch:
    """Padded id matrices for one minibatch.

    ``pair_ids`` is ``[B, n, L]`` (one row per question-option pair); options
    beyond an example's own count are placeholders with ``option_mask`` False.
    """

    examples: list
    answers: np.ndarray
    q_ids: np.ndarray | None = None
    q_mask: np.ndarray | None = None
    pair_ids: np.ndarray | None = None
    pair_mask: np.ndarray | None = None
    option_mask: np.ndarray | None = None
    target_ids: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)


def encode_pairs(pairs: list[list[list[int]]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack ragged per-example option rows into ``[B, n_max, L]`` arrays."""
    b = len(pairs)
    n_max = max(len(p) for p in pairs)
    flat = []
    option_mask = np.zeros((b, n_max), dtype=bool)
    for i, rows in enumerate(pairs):
        option_mask[i, :len(rows)] = True
        flat += rows + [[DELIM]] * (n_max - len(rows))
    ids, mask = pad(flat)
    return ids.reshape(b, n_max, -1), mask.reshape(b, n_max, -1), option_mask


def make_batch(examples: Sequence[MCQAExample], vocab: Vocab, max_source_len: int,
               max_target_len: int, clues: dict[str, list[int]] | None = None) -> Batch:
    """Question ids, question-option pair ids and the answer target.

    With ``clues`` (example id -> clue ids) each pair becomes
    ``Q DELIM C DELIM O`` instead of ``Q DELIM O``.
    """
    qs, pairs, targets = [], [], []
    for ex in examples:
        q = vocab.encode(ex.question)
        opts = [vocab.encode(o) for o in ex.options]
        mid = clues.get(ex.id, []) if clues is not None else ()
        qs.append(truncate_question(q, max_source_len))
        pairs.append([join_pair(q, o, max_source_len, mid) for o in opts])
        targets.append(answer_target(opts[ex.answer_index], max_target_len))
    q_ids, q_mask = pad(qs)
    pair_ids, pair_mask, option_mask = encode_pairs(pairs)
    t_ids, t_mask = pad(targets)
    return Batch(list(examples), np.array([ex.answer_index for ex in examples]),
                 q_ids, q_mask, pair_ids, pair_mask, option_mask, t_ids, t_mask)


def batchify(examples: Sequence[MCQAExample], batch_size: int,
             shuffle_seed: int | None = None) -> list[list[MCQAExample]]:
    """Split into batches, shuffled by ``shuffle_seed`` if given; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    return [[examples[i] for i in order[s:s + batch_size]]
            for s in range(0, len(examples), batch_size)]
