"""SGD training loop: plateau-triggered LR decay, delayed autoregressive
updates, per-epoch checkpoints, and a CSV metrics log."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tape, add, global_norm, neg, scale
from .data import build_vocab, index_example
from .inference import build_lattice, log_marginal
from .model import HsmmModel, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Everything a training run needs besides the data itself.

    The model-shape fields mirror ModelConfig so a run can be described in
    one flat namespace (config files, CLI flags).
    """

    k_base: int
    duplication: int = 1
    d: int = 300
    max_len: int = 4
    autoregressive: bool = False
    lr: float = 0.5
    decay: float = 0.5
    batch_size: int = 32
    max_epochs: int = 10
    dropout_rate: float = 0.0
    clip_norm: float = 5.0
    seed: int = 0
    m1: int = 64
    m2: int = 32
    m3: int = 64
    type_buckets: int = 64
    value_buckets: int = 512
    max_position: int = 16
    min_count: int = 1

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            k_base=self.k_base,
            dup=self.duplication,
            d=self.d,
            max_len=self.max_len,
            m1=self.m1,
            m2=self.m2,
            m3=self.m3,
            autoregressive=self.autoregressive,
            dropout=self.dropout_rate,
            type_buckets=self.type_buckets,
            value_buckets=self.value_buckets,
            max_position=self.max_position,
            seed=self.seed,
        )


class DecaySchedule:
    """Constant learning rate until validation log-likelihood first fails to
    increase; from that epoch on, multiply by `decay` after every epoch."""

    def __init__(self, lr, decay):
        self.lr = float(lr)
        self.decay = float(decay)
        self.started = False
        self.prev_ll = None

    def observe(self, valid_ll):
        """Record an end-of-epoch validation LL; returns the next epoch's lr."""
        if self.prev_ll is not None and valid_ll <= self.prev_ll:
            self.started = True
        if self.started:
            self.lr *= self.decay
        self.prev_ll = valid_ll
        return self.lr


def example_nll(model, ex, rng=None):
    """−log p(y|x) for one example, or None when every tiling is masked."""
    src = model.encode_kb(ex.records)
    lattice = build_lattice(ex, model, src, rng=rng)
    marginal = log_marginal(
        lattice, model.transition_log_probs(src), model.length_log_probs()
    )
    if np.isneginf(marginal.values):
        return None
    return neg(marginal)


def _describe(ex):
    meta = getattr(ex, "meta", None) or {}
    return meta.get("id") or " ".join(ex.tokens[:6])


def loss(model, batch, rng=None):
    """Mean NLL over the batch's feasible examples.

    Returns (scalar tensor, count used); (None, 0) when nothing in the
    batch admits a segmentation.  Infeasible examples are skipped with a
    warning rather than poisoning the whole batch.
    """
    terms = []
    for ex in batch:
        nll = example_nll(model, ex, rng=rng)
        if nll is None:
            log.warning("no feasible segmentation, skipping: %s", _describe(ex))
            continue
        terms.append(nll)
    if not terms:
        return None, 0
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    mean = scale(total, 1.0 / len(terms))
    # probabilities never exceed 1, so the NLL is nonnegative (tiny slack
    # for float rounding; NaN passes through to the caller's abort check)
    assert not float(mean.values) < -1e-9
    return mean, len(terms)


def sgd_step(params, lr, clip_norm=None):
    """Clip by global norm, apply θ ← θ − lr·g, zero the grads.

    Returns the pre-clip gradient norm.
    """
    grads = [p.grad for p in params]
    norm = global_norm(grads)
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        s = clip_norm / norm
        grads = [g * s for g in grads]
    for p, g in zip(params, grads):
        p.values = p.values - lr * g
        p.zero_grad()
    return norm


def corpus_nll(model, examples):
    """Mean NLL over a corpus, forward-only (no dropout, no gradients)."""
    total, used = 0.0, 0
    for ex in examples:
        nll = example_nll(model, ex)
        if nll is None:
            continue
        total += float(nll.values)
        used += 1
    if used == 0:
        raise TrainingError("no feasible examples to evaluate")
    return total / used


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    valid_nll: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    model: HsmmModel
    checkpoint_path: Path
    metrics_path: Path
    history: list = field(default_factory=list)


METRICS_HEADER = ["epoch", "train_nll", "valid_nll", "lr", "seconds"]


def train(corpus, valid_corpus, cfg, out_dir, resume=None):
    """Run the full schedule; checkpoints and metrics land in `out_dir`.

    `resume` continues from a checkpoint written by a previous call: with
    the same seed and data, the continuation reproduces the interrupted
    run's remaining epochs exactly (shuffle and dropout streams are derived
    from (seed, epoch), never from ambient state).
    """
    cfg.validate()
    if not corpus or not valid_corpus:
        raise ValueError("training and validation corpora must be nonempty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"

    schedule = DecaySchedule(cfg.lr, cfg.decay)
    if resume is not None:
        model, state = load_checkpoint(resume)
        if not state:
            raise TrainingError(f"checkpoint {resume} carries no training state")
        start_epoch = int(state["epoch"])
        schedule.lr = float(state["lr"])
        schedule.started = bool(state["decay_started"])
        schedule.prev_ll = state["prev_valid_ll"]
        vocab = model.vocab
    else:
        vocab = build_vocab(corpus, min_count=cfg.min_count)
        model = HsmmModel(cfg.model_config(), vocab)
        start_epoch = 0
        metrics_path.write_text(",".join(METRICS_HEADER) + "\n")

    # examples indexed by the caller are trusted as-is (resume keeps the
    # checkpoint vocabulary, so ids stay consistent across runs)
    for ex in list(corpus) + list(valid_corpus):
        if ex.token_ids is None:
            index_example(ex, vocab, cfg.max_len)

    all_params = model.params()
    ar_ids = {id(p) for p in model.ar_params()}
    history = []
    last_ckpt = Path(resume) if resume is not None else None

    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = schedule.lr
        if cfg.autoregressive and not schedule.started:
            apply = [p for p in all_params if id(p) not in ar_ids]
            frozen = [p for p in all_params if id(p) in ar_ids]
        else:
            apply, frozen = all_params, []

        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(corpus))
        nll_sum, used_total = 0.0, 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [corpus[i] for i in order[lo : lo + cfg.batch_size]]
            rng = (
                np.random.default_rng([cfg.seed, epoch, step])
                if cfg.dropout_rate > 0
                else None
            )
            with Tape() as tape:
                mean, used = loss(model, batch, rng=rng)
                if mean is None:
                    continue
                value = float(mean.values)
                if np.isnan(value):
                    raise TrainingError(
                        f"loss became NaN at epoch {epoch} step {step}; "
                        f"last good checkpoint: {last_ckpt}"
                    )
                tape.backward(mean)
            sgd_step(apply, lr, cfg.clip_norm)
            for p in frozen:
                p.zero_grad()
            nll_sum += value * used
            used_total += used
        if used_total == 0:
            raise TrainingError(f"epoch {epoch}: every example was infeasible")

        train_nll = nll_sum / used_total
        valid_nll = corpus_nll(model, valid_corpus)
        schedule.observe(-valid_nll)

        ckpt = out / f"epoch_{epoch:03d}.npz"
        save_checkpoint(
            ckpt,
            model,
            train_state={
                "epoch": epoch,
                "lr": schedule.lr,
                "decay_started": schedule.started,
                "prev_valid_ll": schedule.prev_ll,
                "seed": cfg.seed,
            },
        )
        last_ckpt = ckpt
        seconds = time.perf_counter() - t0
        stats = EpochStats(epoch, train_nll, valid_nll, lr, seconds)
        history.append(stats)
        with metrics_path.open("a", newline="") as fh:
            csv.writer(fh).writerow(
                [epoch, repr(train_nll), repr(valid_nll), repr(lr), f"{seconds:.3f}"]
            )
        log.info(
            "epoch %d: train %.4f valid %.4f lr %.4g (%.1fs)",
            epoch, train_nll, valid_nll, lr, seconds,
        )

    if last_ckpt is None:
        raise TrainingError("no epochs were run; raise max_epochs")
    return TrainResult(model, last_ckpt, metrics_path, history)
