"""Optimisation and the experiment protocol.

Adam with linear warmup and decoupled weight decay, per-epoch dev evaluation
with patience-based early stopping, multi-seed aggregation, parameter
accounting and an inference latency benchmark.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .baselines import ClueGenerator, T2TEnc, TokenClue, build_model
from .checkpoint import load_into, save_checkpoint
from .data import MCQAExample, Vocab, batchify, build_vocab
from .transformer import ConfigError, ModelConfig

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    eval_batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    seeds: tuple[int, ...] = (1, 10, 20)
    stop_at_accuracy: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)


# -- config files -------------------------------------------------------------------------

RUN_KEYS = {"model": str, "clue_max_len": int, "t2t_target": str, "vocab_max": int}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _coerce(value: str, kind, key: str):
    kind = str(kind)
    try:
        if "tuple" in kind:
            return tuple(int(s) for s in value.replace(",", " ").split())
        if value.lower() == "none" and "None" in kind:
            return None
        if kind.startswith("int") or kind == "<class 'int'>":
            return int(value)
        if "float" in kind:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind}") from None


def split_config(values: dict[str, str]) -> tuple[dict, dict, dict]:
    """Route flat keys to ModelConfig / TrainConfig / run options; unknown keys are an error."""
    mfields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    tfields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    m, t, r = {}, {}, {}
    for k, v in values.items():
        if k in mfields:
            m[k] = _coerce(v, mfields[k], k)
        elif k in tfields:
            t[k] = _coerce(v, tfields[k], k)
        elif k in RUN_KEYS:
            r[k] = RUN_KEYS[k](v)
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return m, t, r


def format_kv(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    return hashlib.sha256(format_kv(dict(sorted(values.items()))).encode()).hexdigest()[:12]


# -- optimiser ----------------------------------------------------------------------------

def lr_schedule(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Linear ramp to ``peak`` over the warmup steps, then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0 or step < 0 or step >= total_steps:
        return 0.0
    warm = warmup_fraction * total_steps
    if warm > 0 and step < warm:
        return peak * step / warm
    return peak * (total_steps - step) / (total_steps - warm)


def decays(name: str) -> bool:
    """Weight decay applies to every parameter except biases and layer-norm gains."""
    return not (name.endswith("bias") or name.endswith(".gain"))


class Adam:
    """Bias-corrected Adam with decoupled weight decay over named parameters."""

    def __init__(self, named_params, weight_decay: float = 0.01):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for n, p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise T.NumericError(f"non-finite gradient in parameter {n}")
        self.t += 1
        c1 = 1.0 - BETA1 ** self.t
        c2 = 1.0 - BETA2 ** self.t
        for n, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[n], self.v[n]
            m *= BETA1
            m += (1 - BETA1) * g
            v *= BETA2
            v += (1 - BETA2) * g * g
            if self.weight_decay and decays(n):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              weight_decay: float = 0.0) -> np.ndarray:
    """Functional single-array Adam update; ``state`` holds ``m``, ``v`` and ``t``."""
    t = state.get("t", 0) + 1
    m = BETA1 * state.get("m", 0.0) + (1 - BETA1) * grad
    v = BETA2 * state.get("v", 0.0) + (1 - BETA2) * grad * grad
    state.update(m=m, v=v, t=t)
    upd = (m / (1 - BETA1 ** t)) / (np.sqrt(v / (1 - BETA2 ** t)) + ADAM_EPS)
    return param * (1.0 - lr * weight_decay) - lr * upd


# -- early stopping -----------------------------------------------------------------------

class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no strict dev improvement.

    Epochs are 1-based; ties keep the earlier epoch.
    """

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record one epoch's dev score; return True if training should stop."""
        self.epoch += 1
        if score > self.best:
            self.best, self.best_epoch = score, self.epoch
        return self.epoch - self.best_epoch >= self.patience


def stopping_trace(scores: Sequence[float], patience: int = 5,
                   max_epochs: int | None = None) -> tuple[int, int]:
    """``(epochs run, best epoch)`` when ``scores`` are the per-epoch dev accuracies."""
    es = EarlyStopping(patience)
    limit = len(scores) if max_epochs is None else min(max_epochs, len(scores))
    for i in range(limit):
        if es.update(scores[i]):
            return i + 1, es.best_epoch
    return limit, es.best_epoch


# -- evaluation ---------------------------------------------------------------------------

def predictions(model, examples: Sequence[MCQAExample], vocab: Vocab,
                batch_size: int = 64) -> np.ndarray:
    if not examples:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    out = []
    with T.no_grad():
        for chunk in batchify(examples, batch_size):
            out.append(np.asarray(model.predict(model.prepare(chunk, vocab))))
    return np.concatenate(out)


def evaluate_accuracy(model, examples: Sequence[MCQAExample], vocab: Vocab,
                      batch_size: int = 64) -> float:
    """Fraction of examples whose predicted option is the gold one."""
    pred = predictions(model, examples, vocab, batch_size)
    gold = np.array([ex.answer_index for ex in examples])
    return float((pred == gold).mean())


def clue_exact_match(generator: ClueGenerator, examples, vocab, batch_size: int = 64) -> float:
    """Share of examples whose greedy clue equals the gold answer tokens."""
    hits = 0
    for chunk in batchify(examples, batch_size):
        clues = generator.clues(generator.prepare(chunk, vocab))
        hits += sum(c == vocab.encode(ex.answer)[:generator.clue_max_len]
                    for c, ex in zip(clues, chunk))
    return hits / len(examples)


# -- training loop -------------------------------------------------------------------------

@dataclass
class TrainResult:
    seed: int
    best_epoch: int
    epochs_run: int
    dev_accuracy: float
    test_accuracy: float | None
    train_seconds: float
    history: list[dict] = field(default_factory=list)


def snapshot(model) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def restore(model, snap: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        p.data[...] = snap[n]


def fit(model, vocab: Vocab, train: Sequence[MCQAExample], dev: Sequence[MCQAExample],
        cfg: TrainConfig, seed: int, dev_metric: Callable | None = None,
        log: Callable[[str], None] | None = None) -> tuple[int, int, float, list[dict]]:
    """Train ``model`` in place and leave it at its best dev epoch.

    Returns ``(best_epoch, epochs_run, best_dev, history)``.  ``dev_metric``
    defaults to dev accuracy.
    """
    if not train or not dev:
        raise ValueError("training needs non-empty train and dev sets")
    metric = dev_metric or (lambda m: evaluate_accuracy(m, dev, vocab, cfg.eval_batch_size))
    opt = Adam(model.trainable_named_parameters(), cfg.weight_decay)
    n_batches = math.ceil(len(train) / cfg.batch_size)
    total = cfg.max_epochs * n_batches
    es = EarlyStopping(cfg.patience)
    best = snapshot(model)
    history = []
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train(True, np.random.default_rng([seed, epoch]))
        losses = []
        for bi, chunk in enumerate(batchify(train, cfg.batch_size, shuffle_seed=seed * 100_003 + epoch)):
            batch = model.prepare(chunk, vocab)
            opt.zero_grad()
            loss = model.losses(batch)
            value = loss.total.item()
            if not math.isfinite(value):
                raise T.NumericError(f"non-finite loss at epoch {epoch}, batch {bi + 1}")
            T.backward(loss.total)
            step += 1
            opt.step(lr_schedule(step, total, cfg.learning_rate, cfg.warmup_fraction))
            losses.append((value, loss.gen.item(), loss.read.item()))
        score = metric(model)
        mean = np.mean(losses, axis=0)
        history.append(dict(epoch=epoch, loss=mean[0], gen_loss=mean[1], read_loss=mean[2], dev=score))
        if log:
            log(f"epoch {epoch:3d}  loss {mean[0]:.4f}  dev {score:.4f}")
        if score > es.best:
            best = snapshot(model)
        stop = es.update(score)
        if stop or (cfg.stop_at_accuracy is not None and score >= cfg.stop_at_accuracy):
            break
    restore(model, best)
    model.eval()
    return es.best_epoch, epoch, es.best, history


def train_model(kind: str, model_cfg: ModelConfig, vocab: Vocab, train, dev, test,
                cfg: TrainConfig, seed: int, clue_max_len: int | None = None,
                t2t_target: str = "id", log=None):
    """Build, train and evaluate one model; returns ``(model, TrainResult)``.

    ``token-clue`` trains its generator first (selected by dev exact match),
    freezes it, then trains a fresh reader on clue-augmented pairs.
    """
    start = time.perf_counter()
    if kind == "token-clue":
        gen = ClueGenerator(model_cfg, np.random.default_rng([seed, 1]), clue_max_len)
        fit(gen, vocab, train, dev, cfg, seed,
            dev_metric=lambda g: clue_exact_match(g, dev, vocab, cfg.eval_batch_size), log=log)
        model = TokenClue(gen, T2TEnc(model_cfg, np.random.default_rng(seed)))
    else:
        model = build_model(kind, model_cfg, seed, clue_max_len, t2t_target)
    best_epoch, ran, dev_acc, hist = fit(model, vocab, train, dev, cfg, seed, log=log)
    test_acc = evaluate_accuracy(model, test, vocab, cfg.eval_batch_size) if test else None
    return model, TrainResult(seed, best_epoch, ran, dev_acc, test_acc,
                              time.perf_counter() - start, hist)


# -- reporting ------------------------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no values to aggregate")
    return float(a.mean()), float(a.std())


def format_cell(values_pct: Sequence[float]) -> str:
    m, s = mean_std(sorted(values_pct))
    return f"{m:.2f} (±{s:.2f})"


def multi_seed_report(runs: dict[str, Sequence[float]]) -> list[tuple[str, str]]:
    """Model name -> formatted mean (±std) of percentage accuracies, in name order."""
    return [(name, format_cell(vals)) for name, vals in sorted(runs.items())]


# -- parameter accounting and latency ---------------------------------------------------------

def count_params(model) -> tuple[int, dict[str, int]]:
    groups = model.parameter_groups()
    return model.num_parameters(), groups


def bench_latency(model, examples, vocab: Vocab, config: dict | None = None,
                  warmup: int = 1) -> dict:
    """Per-question wall-clock over ``examples`` (one question per call) after ``warmup`` calls."""
    if not examples:
        raise ValueError("cannot benchmark on an empty dataset")
    model.eval()
    with T.no_grad():
        for ex in list(examples)[:warmup]:
            model.predict(model.prepare([ex], vocab))
        times = []
        for ex in examples:
            t0 = time.perf_counter()
            model.predict(model.prepare([ex], vocab))
            times.append(time.perf_counter() - t0)
    m, s = mean_std(times)
    return dict(n=len(times), mean_seconds=m, std_seconds=s,
                config_hash=config_hash(config or {}), model=getattr(model, "kind", "?"))


# -- run directories ----------------------------------------------------------------------------

def make_vocab(datasets: Sequence[Sequence[MCQAExample]], vocab_max: int | None = None) -> Vocab:
    corpus = []
    for ds in datasets:
        for ex in ds:
            corpus += [ex.dataset_name, ex.question, *ex.options]
    return build_vocab(corpus, vocab_max)


def save_run(out: str | Path, kind: str, model, vocab: Vocab, model_cfg: ModelConfig,
             cfg: TrainConfig, result: TrainResult, run_opts: dict) -> Path:
    """Write one seed's run directory (config, vocab, checkpoint(s), metrics, history)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot_cfg = dict(model=kind, **model_cfg.to_dict(), **dataclasses.asdict(cfg), **run_opts)
    snapshot_cfg["seeds"] = (result.seed,)
    (out / "config.txt").write_text(format_kv(snapshot_cfg))
    vocab.save(out / "vocab.txt")
    files = ["config.txt", "vocab.txt", "model.ckpt", "metrics.txt", "history.tsv"]
    if isinstance(model, TokenClue):
        save_checkpoint(out / "model.ckpt", model.reader.named_parameters())
        save_checkpoint(out / "generator.ckpt", model.generator.named_parameters())
        files.append("generator.ckpt")
    else:
        save_checkpoint(out / "model.ckpt", model.named_parameters())
    metrics = dict(model=kind, seed=result.seed, best_epoch=result.best_epoch,
                   epochs_run=result.epochs_run, dev_accuracy=repr(result.dev_accuracy),
                   test_accuracy=repr(result.test_accuracy), train_seconds=f"{result.train_seconds:.3f}",
                   params=model.num_parameters(), config_hash=config_hash(snapshot_cfg))
    (out / "metrics.txt").write_text(format_kv(metrics))
    rows = ["epoch\tloss\tgen_loss\tread_loss\tdev"]
    rows += [f"{h['epoch']}\t{h['loss']:.6f}\t{h['gen_loss']:.6f}\t{h['read_loss']:.6f}\t{h['dev']:.6f}"
             for h in result.history]
    (out / "history.tsv").write_text("\n".join(rows) + "\n")
    (out / "MANIFEST").write_text("\n".join(files) + "\n")
    return out


def load_run(ckpt_dir: str | Path):
    """Rebuild the model stored in a run directory; returns ``(model, vocab, config dict)``."""
    from .baselines import PipelineError
    d = Path(ckpt_dir)
    for name in ("config.txt", "vocab.txt", "model.ckpt"):
        if not (d / name).exists():
            raise FileNotFoundError(str(d / name))
    values = parse_kv((d / "config.txt").read_text(), str(d / "config.txt"))
    mvals, _, run = split_config(values)
    model_cfg = ModelConfig(**mvals)
    vocab = Vocab.load(d / "vocab.txt")
    kind = run.get("model", "genmc")
    model = build_model(kind, model_cfg, 0, run.get("clue_max_len"), run.get("t2t_target", "id"))
    if isinstance(model, TokenClue):
        if not (d / "generator.ckpt").exists():
            raise PipelineError(f"token-clue run {d} has no stage-1 generator checkpoint")
        model.generator = ClueGenerator(model_cfg, np.random.default_rng(0), run.get("clue_max_len"))
        load_into(d / "generator.ckpt", model.generator.named_parameters())
        load_into(d / "model.ckpt", model.reader.named_parameters())
    else:
        load_into(d / "model.ckpt", model.named_parameters())
    model.eval()
    return model, vocab, values


def read_metrics(run_dir: str | Path) -> dict[str, str]:
    p = Path(run_dir) / "metrics.txt"
    return parse_kv(p.read_text(), str(p))


def grid_search(kind: str, model_cfg: ModelConfig, vocab: Vocab, train, dev, cfg: TrainConfig,
                learning_rates=(1e-4, 5e-5, 1e-5), batch_sizes=(8, 64), seed: int = 1):
    """Sequential sweep over learning rate x batch size; returns ``(best (lr, bs), table)``."""
    table = []
    for lr in learning_rates:
        for bs in batch_sizes:
            c = dataclasses.replace(cfg, learning_rate=lr, batch_size=bs)
            _, res = train_model(kind, model_cfg, vocab, train, dev, [], c, seed)
            table.append((lr, bs, res.dev_accuracy))
    best = max(table, key=lambda r: (r[2], -table.index(r)))
    return (best[0], best[1]), table


def json_dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)
