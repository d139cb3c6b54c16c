"""Masked NLL, teacher forcing, SGD/Adam, step LR decay and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from qops import autodiff as ad
from qops import checkpoint
from qops.autodiff import Tensor
from qops.data import EOS_ID, PAD_ID, SOS_ID, Example, Vocab, batchify, build_vocab
from qops.evaluation import evaluate_pairs
from qops.seq2seq import (
    ModelConfig,
    ModelParams,
    attention_keys,
    check_shapes,
    decode_step,
    encode,
    init_params,
    initial_state,
    param_shapes,
    predict,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    epochs: int = 20
    lr0: float = 1e-3
    batch_size: int = 10
    teacher_forcing_ratio: float = 0.5
    lr_step: int = 10
    lr_gamma: float = 0.1
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    clip_norm: float | None = None
    gradcheck_every: int = 0
    max_decode_len: int = 20

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', not {self.optimizer!r}")
        if not 0.0 <= self.teacher_forcing_ratio <= 1.0:
            raise ValueError("teacher_forcing_ratio must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_step < 1:
            raise ValueError("epochs, batch_size and lr_step must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in TRAIN_PRESETS:
            raise KeyError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
        model_over = overrides.pop("model_overrides", {})
        base = dict(TRAIN_PRESETS[name])
        base["model"] = ModelConfig.preset(name, **model_over)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


# Published presets: optimizer, epochs, starting lr, batch size, teacher forcing
TRAIN_PRESETS = {
    "ex1": dict(optimizer="adam", epochs=20, lr0=1e-3, batch_size=10, teacher_forcing_ratio=0.5),
    "ex2": dict(optimizer="sgd", epochs=30, lr0=1e-2, batch_size=5, teacher_forcing_ratio=0.5),
}


# ---------------------------------------------------------------- losses


def nll_loss(step_dists: Sequence[Tensor], targets: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Mean negative log-probability of the targets over unmasked steps."""
    if mask is None:
        mask = [True] * len(targets)
    picked = [ad.log(ad.pick(d, 0, int(t))) for d, t, m in zip(step_dists, targets, mask) if m]
    if not picked:
        raise ad.DomainError("nll_loss: mask selects no steps")
    return ad.scale(ad.sum_all(picked), -1.0 / len(picked))


def teacher_forced_rollout(pos_ids: Sequence[int], targets: Sequence[int], params: ModelParams,
                           cfg: ModelConfig, ratio: float, rng: np.random.Generator
                           ) -> tuple[list[Tensor], list[int]]:
    """Decode ``len(targets)`` steps, feeding gold or own argmax per step.

    One coin is drawn from ``rng`` for every step after the first. Returns
    the step distributions and the decoder inputs that were fed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("teacher forcing ratio must lie in [0, 1]")
    H = encode(pos_ids, params)
    keys = attention_keys(H, params)
    s = initial_state(H, params)
    y = SOS_ID
    dists, fed = [], []
    for t, gold in enumerate(targets):
        if t > 0:
            if rng.random() < ratio:
                y = int(targets[t - 1])
            else:
                scores = dists[-1].data[0].copy()
                scores[[PAD_ID, SOS_ID]] = -np.inf
                y = int(np.argmax(scores))
        fed.append(y)
        dist, s, _ = decode_step(y, s, H, params, cfg, keys)
        dists.append(dist)
    return dists, fed


def example_loss(pos_ids, targets, params, cfg, ratio, rng) -> Tensor:
    dists, _ = teacher_forced_rollout(pos_ids, targets, params, cfg, ratio, rng)
    return nll_loss(dists, targets)


def batch_loss(batch, params: ModelParams, cfg: ModelConfig, ratio: float, rng: np.random.Generator,
               reduction: str = "mean") -> Tensor:
    """Per-token NLL per example, then mean (or sum) over the batch."""
    losses = []
    for b in range(len(batch)):
        pos_ids, _, targets = batch.row(b)
        losses.append(example_loss(pos_ids, targets, params, cfg, ratio, rng))
    out = ad.sum_all(losses)
    if reduction == "mean":
        return ad.scale(out, 1.0 / len(losses))
    if reduction == "sum":
        return out
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- optimizers


def _require_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {p.name or p!r} has no gradient")


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """theta <- theta - lr * grad, in place; no momentum."""
    _require_grads(params)
    for p in params:
        p.data -= lr * p.grad


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    _require_grads(params)
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise TrainingError("Adam state does not match the parameter shapes")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, lr0: float, step: int = 10, gamma: float = 0.1) -> float:
    """Step decay: ``lr0`` multiplied by ``gamma`` once per ``step`` epochs."""
    lr = lr0
    for _ in range(epoch // step):
        lr *= gamma
    return lr


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        k = max_norm / norm
        for p in params:
            p.grad = p.grad * k
    return norm


# ---------------------------------------------------------------- training loop


@dataclass
class Seq2SeqModel:
    config: ModelConfig
    params: ModelParams
    pos_vocab: Vocab
    op_vocab: Vocab

    def predict_ids(self, pos_ids, max_len: int = 20):
        return predict(pos_ids, self.params, self.config, max_len)

    def predict_symbols(self, pos: Sequence[str], max_len: int = 20) -> tuple[list[str], np.ndarray]:
        ids, trace = predict(self.pos_vocab.encode(pos), self.params, self.config, max_len)
        return self.op_vocab.decode(ids), trace


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    dev_acc: float | None
    lr: float


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    final_lr: float = 0.0
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "train_acc", "dev_acc", "lr"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), repr(e.train_acc),
                            "" if e.dev_acc is None else repr(e.dev_acc), repr(e.lr)])


def corpus_accuracy(model: Seq2SeqModel, corpus: Sequence[Example], max_len: int = 20) -> float:
    pairs = ((model.predict_symbols(ex.pos, max_len)[0], ex.ops) for ex in corpus)
    return evaluate_pairs(pairs, model.op_vocab.content_symbols()).token_accuracy


def train(config: TrainConfig, corpus: Sequence[Example], dev: Sequence[Example] | None = None,
          pos_vocab: Vocab | None = None, op_vocab: Vocab | None = None) -> tuple[Seq2SeqModel, TrainReport]:
    """Train the operator predictor; deterministic for a given seed."""
    if not corpus:
        raise TrainingError("training corpus is empty")
    started = time.perf_counter()
    pos_vocab = pos_vocab or build_vocab(corpus, "pos")
    op_vocab = op_vocab or build_vocab(corpus, "ops", strict=True)
    mcfg = replace(config.model, pos_vocab_size=len(pos_vocab), op_vocab_size=len(op_vocab))
    params = init_params(mcfg, config.seed)
    model = Seq2SeqModel(mcfg, params, pos_vocab, op_vocab)
    tensors = params.tensors()
    adam = AdamState.for_params(tensors) if config.optimizer == "adam" else None
    coins = np.random.default_rng(config.seed)
    report = TrainReport(seed=config.seed)
    lr = config.lr0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.lr0, config.lr_step, config.lr_gamma)
        batches = batchify(corpus, config.batch_size, config.seed + epoch,
                           pos_vocab=pos_vocab, op_vocab=op_vocab)
        total = 0.0
        for b_idx, batch in enumerate(batches):
            ad.zero_grad(tensors)
            loss = batch_loss(batch, params, mcfg, config.teacher_forcing_ratio, coins)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            ad.backward(loss)
            if config.clip_norm is not None:
                clip_gradients(tensors, config.clip_norm)
            if config.optimizer == "adam":
                adam_step(tensors, adam, lr)
            else:
                sgd_step(tensors, lr)
            total += value
        if config.gradcheck_every and (epoch + 1) % config.gradcheck_every == 0:
            _debug_gradcheck(batches[0], params, mcfg)
        record = EpochRecord(
            epoch=epoch,
            loss=total / len(batches),
            train_acc=corpus_accuracy(model, corpus, config.max_decode_len),
            dev_acc=corpus_accuracy(model, dev, config.max_decode_len) if dev else None,
            lr=lr,
        )
        report.epochs.append(record)
        log.info("epoch %d loss %.6f train_acc %.4f lr %g", epoch, record.loss, record.train_acc, lr)
    ad.zero_grad(tensors)
    report.final_lr = lr
    report.seconds = time.perf_counter() - started
    return model, report


def _debug_gradcheck(batch, params: ModelParams, cfg: ModelConfig, tol: float = 1e-3) -> None:
    small = replace(batch, examples=batch.examples[:2], pos_ids=batch.pos_ids[:2], pos_mask=batch.pos_mask[:2],
                    dec_in=batch.dec_in[:2], dec_out=batch.dec_out[:2], tgt_mask=batch.tgt_mask[:2])
    f = lambda: batch_loss(small, params, cfg, 1.0, np.random.default_rng(0))  # noqa: E731
    err = ad.grad_check(f, params.tensors(), 1e-4)
    if err > tol:
        raise TrainingError(f"gradient check failed during training: {err:.3e} > {tol}")


# ---------------------------------------------------------------- checkpoints

SECTION = "S2SQ"


def save_checkpoint(model: Seq2SeqModel, path: str | Path, train_config: TrainConfig | None = None) -> None:
    cfg = {f"model.{k}": str(v) for k, v in model.config.to_dict().items()}
    cfg["pos_vocab"] = json.dumps(model.pos_vocab.symbols)
    cfg["op_vocab"] = json.dumps(model.op_vocab.symbols)
    if train_config is not None:
        cfg["train"] = json.dumps(train_config.to_dict())
    checkpoint.save(path, SECTION, cfg, model.params.arrays())


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Seq2SeqModel:
    """Load a model; with ``expect`` the stored dims must match it."""
    _, cfg, arrays = checkpoint.load(path, SECTION)
    try:
        mcfg = ModelConfig(
            **{k: (v if k == "g_state_choice" else int(v))
               for k, v in ((k[len("model."):], v) for k, v in cfg.items() if k.startswith("model."))}
        )
        pos_vocab = Vocab.from_symbols(json.loads(cfg["pos_vocab"]))
        op_vocab = Vocab.from_symbols(json.loads(cfg["op_vocab"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.FormatError(f"{path}: bad config block ({exc})") from exc
    params = ModelParams.from_arrays(arrays)
    target = mcfg
    if expect is not None:
        target = replace(expect, pos_vocab_size=mcfg.pos_vocab_size, op_vocab_size=mcfg.op_vocab_size)
    check_shapes(params, param_shapes(target))
    return Seq2SeqModel(mcfg, params, pos_vocab, op_vocab)
