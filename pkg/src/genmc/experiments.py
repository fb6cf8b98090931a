"""Reference experiment settings for the synthetic tasks.

``twohop_protocol`` is the directional comparison: every model kind trains on
the same two-hop data (bridge facts for every key, two-hop questions for the
training keys only) and is tested on two-hop questions about held-out keys.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .data import gen_synth_copy, gen_synth_twohop
from .training import TrainConfig, make_vocab, mean_std, train_model
from .transformer import ModelConfig


@dataclass
class TwoHopSetup:
    vocab: int = 600
    keys_per_mid: int = 4
    bridge_fraction: float = 0.5
    holdout_fraction: float = 0.2
    world_seed: int = 7
    n_train: int = 5000
    n_dev: int = 500
    n_test: int = 500
    n_options: int = 4

    def datasets(self):
        common = dict(holdout_fraction=self.holdout_fraction, keys_per_mid=self.keys_per_mid)
        train = gen_synth_twohop(self.n_train, self.vocab, self.n_options, self.world_seed, part="train",
                                 sample_seed=100, bridge_fraction=self.bridge_fraction, **common)
        dev = gen_synth_twohop(self.n_dev, self.vocab, self.n_options, self.world_seed, part="heldout",
                               sample_seed=200, **common)
        test = gen_synth_twohop(self.n_test, self.vocab, self.n_options, self.world_seed, part="heldout",
                                sample_seed=300, **common)
        return train, dev, test


def desk_model_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(d_model=32, n_heads=4, n_enc_layers=2, n_dec_layers=2, d_ff=64,
                       vocab_size=vocab_size)


def desk_train_config(**kw) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=8, max_epochs=30, patience=5)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class ProtocolResult:
    test: dict[str, list[float]] = field(default_factory=dict)
    dev: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def mean(self, kind: str) -> float:
        return mean_std(self.test[kind])[0]


def twohop_protocol(kinds=("genmc", "weak-clue", "t2t-enc", "token-clue"), seeds=(1, 10, 20),
                    setup: TwoHopSetup | None = None, log=None, clue_max_len: int = 4) -> ProtocolResult:
    setup = setup or TwoHopSetup()
    train, dev, test = setup.datasets()
    vocab = make_vocab([train, dev, test])
    mc = desk_model_config(len(vocab))
    cfg = desk_train_config(seeds=tuple(seeds))
    out = ProtocolResult()
    for kind in kinds:
        t0 = time.perf_counter()
        for seed in seeds:
            _, res = train_model(kind, mc, vocab, train, dev, test, cfg, seed, clue_max_len=clue_max_len)
            out.test.setdefault(kind, []).append(100.0 * res.test_accuracy)
            out.dev.setdefault(kind, []).append(100.0 * res.dev_accuracy)
            if log:
                log(f"{kind} seed {seed}: best epoch {res.best_epoch}, dev {res.dev_accuracy:.3f}, "
                    f"test {res.test_accuracy:.3f} ({res.train_seconds:.0f}s)")
        out.seconds[kind] = time.perf_counter() - t0
    return out


def copy_overfit(kind: str, n: int = 64, max_epochs: int = 300, seed: int = 1):
    """Train on ``n`` copy examples until train accuracy reaches 1.0; returns ``(accuracy, epochs)``."""
    exs = gen_synth_copy(n, 64, 4, 0)
    vocab = make_vocab([exs])
    cfg = desk_train_config(max_epochs=max_epochs, patience=max_epochs, stop_at_accuracy=1.0)
    _, res = train_model(kind, desk_model_config(len(vocab)), vocab, exs, exs, [], cfg, seed)
    return res.dev_accuracy, res.epochs_run
