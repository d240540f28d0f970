"""Loss, Adam, the training loop and evaluation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tt
from .data import BoldSequence, random_crop
from .errors import ContractError, DivergenceError, NonFiniteError
from .metrics import accuracy, macro_f1, roc_auc
from .model import NeuroSsmModel, forward, predict_proba
from .seeding import stream
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 4e-5
    crop_len: int | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_wd: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs >= 0 and batch_size >= 1 required")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("lr and weight_decay must be non-negative")
        if self.crop_len is not None and self.crop_len < 1:
            raise ContractError("crop_len must be positive")

    def replace(self, **kw) -> TrainConfig:
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainConfig(**vals)

    def to_items(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) for f in fields(self)}


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = tt.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ContractError(f"logits {logits.shape} do not match {labels.size} labels")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    logp = tt.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = -1.0 / labels.size
    return tt.mul(logp, Tensor(onehot)).sum()


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(state: AdamState, params, grads, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction.

    Decoupled decay shrinks each parameter by ``lr * wd`` before the Adam
    step; the coupled variant adds ``wd * theta`` to the gradient instead.
    """
    if len(params) != len(state.m):
        raise ContractError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.decoupled_wd:
            p.data -= cfg.lr * cfg.weight_decay * p.data
        else:
            g = g + cfg.weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _by_length(xs: list[np.ndarray]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = defaultdict(list)
    for i, x in enumerate(xs):
        groups[x.shape[0]].append(i)
    return groups


def batch_loss_and_grad(model: NeuroSsmModel, xs: list[np.ndarray], ys: list[int]) -> float:
    """Mean cross-entropy over the batch; gradients accumulate in ``model``.

    Sequences of different lengths are run as separate sub-batches.
    """
    total = 0.0
    for _, idx in sorted(_by_length(xs).items()):
        x = Tensor(np.stack([xs[i] for i in idx]))
        loss = cross_entropy(forward(model, x), [ys[i] for i in idx])
        part = tt.mul(loss, len(idx) / len(xs))
        part.backward()
        total += part.item()
    return total


@dataclass
class TrainResult:
    model: NeuroSsmModel
    loss_trace: list[float] = field(default_factory=list)
    batches_per_epoch: int = 0

    def epoch_means(self) -> list[float]:
        k = self.batches_per_epoch
        return [float(np.mean(self.loss_trace[i:i + k])) for i in range(0, len(self.loss_trace), k)]


def batch_order(n: int, cfg: TrainConfig) -> list[list[int]]:
    """Mini-batch index lists for every epoch; a pure function of ``cfg.seed``."""
    rng = stream(cfg.seed, "shuffle")
    out = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        out += [perm[i:i + cfg.batch_size].tolist() for i in range(0, n, cfg.batch_size)]
    return out


def train(model: NeuroSsmModel, data: list[BoldSequence], cfg: TrainConfig,
          on_batch=None) -> TrainResult:
    if not data:
        raise ContractError("training data is empty")
    labels = sorted({s.label for s in data})
    if labels[-1] >= model.config.n_classes:
        raise ContractError(f"label {labels[-1]} outside the model's {model.config.n_classes} classes")
    params = model.parameters()
    state = AdamState.zeros_like(params)
    crop_rng = stream(cfg.seed, "crop")
    per_epoch = -(-len(data) // cfg.batch_size)
    result = TrainResult(model, [], per_epoch)
    for step, idx in enumerate(batch_order(len(data), cfg)):
        xs = [data[i].series for i in idx]
        if cfg.crop_len is not None:
            xs = [random_crop(x, min(cfg.crop_len, x.shape[0]), crop_rng) for x in xs]
        model.zero_grad()
        try:
            loss = batch_loss_and_grad(model, xs, [data[i].label for i in idx])
        except NonFiniteError as exc:
            raise DivergenceError(f"{exc} at step {step} (epoch {step // per_epoch}); "
                                  "try a smaller learning rate") from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step} "
                                  f"(epoch {step // per_epoch}); try a smaller learning rate")
        result.loss_trace.append(loss)
        adam_step(state, params, [p.grad for p in params], cfg)
        if on_batch is not None:
            on_batch(step, loss)
    return result


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    auc: float | None
    per_sample: list[tuple[int, list[float]]]
    seed: int = 0
    split: str = ""

    @classmethod
    def from_predictions(cls, y_true, probs, seed: int = 0, split: str = "") -> EvalReport:
        y_true = np.asarray(y_true, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        return cls(
            accuracy=accuracy(y_true, probs),
            macro_f1=macro_f1(y_true, np.argmax(probs, axis=1), probs.shape[1]),
            auc=roc_auc(y_true, probs),
            per_sample=[(int(y), p.tolist()) for y, p in zip(y_true, probs)],
            seed=seed, split=split,
        )

    def recompute(self) -> EvalReport:
        y = [t for t, _ in self.per_sample]
        return EvalReport.from_predictions(y, [p for _, p in self.per_sample], self.seed, self.split)


def predict(model: NeuroSsmModel, data: list[BoldSequence]) -> np.ndarray:
    """Class probabilities for full-length sequences, in input order."""
    xs = [s.series for s in data]
    probs = np.empty((len(xs), model.config.n_classes))
    for _, idx in sorted(_by_length(xs).items()):
        probs[idx] = predict_proba(model, Tensor(np.stack([xs[i] for i in idx])))
    return probs


def evaluate(model: NeuroSsmModel, data: list[BoldSequence], seed: int = 0, split: str = "") -> EvalReport:
    if not data:
        raise ContractError("evaluation data is empty")
    return EvalReport.from_predictions([s.label for s in data], predict(model, data), seed, split)
