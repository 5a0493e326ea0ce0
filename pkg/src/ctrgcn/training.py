"""Optimizer, schedule, loss, train/eval loops and multi-stream score fusion."""

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, ContractError, DimensionError, FormatError
from .network import Model, encode_checkpoint, model_forward, round_to_storage, save_checkpoint
from .skeleton import MODALITIES, SkeletonSequence
from .tensor import Tensor


# -- schedule and optimizer ----------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.1
    warmup_epochs: int = 5
    decay_epochs: Tuple[int, ...] = (35, 55)
    decay_factor: float = 0.1
    total_epochs: int = 65

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.base_lr < 0 or not 0 < self.decay_factor <= 1:
            raise ConfigurationError("base_lr must be >= 0 and decay_factor in (0, 1]")
        if self.warmup_epochs < 0 or self.total_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigurationError(f"decay epochs must be strictly increasing, got {d}")
        if d and d[-1] >= self.total_epochs:
            raise ConfigurationError(f"decay epoch {d[-1]} is not below total_epochs={self.total_epochs}")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Linear warmup to ``base_lr`` over the first epochs, then step decay."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    steps = sum(1 for d in schedule.decay_epochs if d <= epoch)
    return schedule.base_lr * schedule.decay_factor ** steps


@dataclass
class OptimizerState:
    velocity: List[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 4e-4
    lr: float = 0.1


def make_optimizer(params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 4e-4,
                   lr: float = 0.1) -> OptimizerState:
    return OptimizerState([np.zeros_like(p.data) for p in params], momentum, weight_decay, lr)


def sgd_step(opt: OptimizerState, params: Sequence[Tensor], grads: Optional[Sequence[np.ndarray]] = None):
    """``v = momentum * v + g + decay * p``; ``p -= lr * v``, in place."""
    if grads is None:
        grads = [p.grad for p in params]
    if not len(params) == len(grads) == len(opt.velocity):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(opt.velocity)} velocity buffers")
    for p, g, v in zip(params, grads, opt.velocity):
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} / velocity {v.shape} do not match parameter {p.shape}")
        v *= opt.momentum
        v += g + opt.weight_decay * p.data
        p.data -= opt.lr * v
    return params


# -- loss ----------------------------------------------------------------------

def _check_labels(labels, k: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of a softmax classifier."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, K], got {logits.shape}")
    b, k = logits.shape
    labels = _check_labels(labels, k, b)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return -(tn.log_softmax(logits) * onehot).sum() / b


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalResult:
    top1: float
    per_class: Dict[int, float]
    predictions: np.ndarray
    logits: np.ndarray


def predict_logits(model: Model, samples: Sequence[SkeletonSequence], batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        with tn.no_grad():
            chunks = [model_forward(model, samples[i:i + batch_size]).data
                      for i in range(0, len(samples), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(chunks)


def accuracy_report(predictions: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[int, float]]:
    per_class = {int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}
    return float(np.mean(predictions == labels)), per_class


def evaluate(model: Model, samples: Sequence[SkeletonSequence], batch_size: int = 32) -> EvalResult:
    """Top-1 and per-class accuracy with evaluation-mode normalization."""
    if len(samples) == 0:
        raise ContractError("cannot evaluate an empty split")
    logits = predict_logits(model, samples, batch_size)
    labels = np.array([s.label for s in samples])
    predictions = np.argmax(logits, axis=1)
    top1, per_class = accuracy_report(predictions, labels)
    return EvalResult(top1, per_class, predictions, logits)


# -- training loop -------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    test_acc: float

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.17g} loss={self.loss:.17g} "
                f"train_acc={self.train_acc:.17g} test_acc={self.test_acc:.17g}")


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_test_acc: float = -1.0
    diverged: bool = False
    best_state: Optional[Dict[str, np.ndarray]] = None

    def lines(self) -> List[str]:
        out = [r.line() for r in self.records]
        if self.diverged:
            out.append(f"diverged epoch={self.records[-1].epoch if self.records else 0}")
        return out

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


def state_dict(model: Model) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_tensors()}


def load_state(model: Model, state: Dict[str, np.ndarray]) -> None:
    for name, t in model.named_tensors():
        t.data[...] = state[name]


def train_step(model: Model, opt: OptimizerState, batch: Sequence[SkeletonSequence]) -> Tuple[float, np.ndarray]:
    params = model.parameters()
    model.zero_grad()
    logits = model_forward(model, batch)
    loss = cross_entropy(logits, [s.label for s in batch])
    loss.backward()
    sgd_step(opt, params)
    return float(loss.data), np.argmax(logits.data, axis=1)


def train(model: Model, train_set: Sequence[SkeletonSequence], test_set: Sequence[SkeletonSequence],
          schedule: Schedule, opt: Optional[OptimizerState] = None, seed: int = 0, batch_size: int = 16,
          checkpoint_path=None, on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainLog:
    """Seeded mini-batch SGD over ``schedule.total_epochs`` epochs.

    ``train_acc`` is measured on the training batches as they are seen, in
    training mode; ``test_acc`` in evaluation mode after each epoch.  The best
    test-accuracy state is kept on the log and written to ``checkpoint_path``.
    """
    if len(train_set) == 0:
        raise ContractError("training set is empty")
    if opt is None:
        opt = make_optimizer(model.parameters())
    rng = np.random.default_rng(seed)
    log = TrainLog()
    params = model.parameters()
    for epoch in range(schedule.total_epochs):
        opt.lr = lr_at(schedule, epoch)
        model.train()
        order = rng.permutation(len(train_set))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start:start + batch_size]]
            loss, pred = train_step(model, opt, batch)
            total_loss += loss * len(batch)
            correct += int(np.sum(pred == np.array([s.label for s in batch])))
        mean_loss = total_loss / len(train_set)
        test_acc = evaluate(model, test_set).top1 if len(test_set) else float("nan")
        record = EpochRecord(epoch, opt.lr, mean_loss, correct / len(train_set), test_acc)
        log.records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(p.data)) for p in params):
            log.diverged = True
            break
        if len(test_set) and test_acc > log.best_test_acc:
            log.best_test_acc, log.best_epoch = test_acc, epoch
            log.best_state = state_dict(model)
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
    if checkpoint_path is not None and log.best_state is None and not log.diverged:
        save_checkpoint(model, checkpoint_path)
    return log


def checkpoint_digest(model: Model) -> str:
    return hashlib.sha256(encode_checkpoint(model)).hexdigest()


# -- score files and fusion ----------------------------------------------------

@dataclass
class StreamScores:
    """Per-sample class scores (logits) of one modality stream."""

    modality: str
    ids: List[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.ids):
            raise DimensionError(f"scores {self.scores.shape} do not match {len(self.ids)} sample ids")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("duplicate sample ids in score stream")


def encode_scores(stream: StreamScores) -> str:
    lines = []
    for sid, row in zip(stream.ids, stream.scores):
        if not sid or any(ch.isspace() for ch in sid):
            raise FormatError(f"sample id {sid!r} must be non-empty without whitespace")
        lines.append(sid + " " + " ".join(f"{v:.17g}" for v in row))
    return "".join(line + "\n" for line in lines)


def decode_scores(text: str, modality: str = "joint") -> StreamScores:
    ids, rows = [], []
    offset = 0
    for line in text.splitlines(keepends=True):
        parts = line.split()
        if parts:
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"non-numeric score in line {line.strip()!r}", offset) from exc
            if rows and len(rows[-1]) != len(rows[0]):
                raise FormatError(f"line has {len(rows[-1])} scores, expected {len(rows[0])}", offset)
            ids.append(parts[0])
        offset += len(line.encode("utf-8"))
    if not rows or not rows[0]:
        raise FormatError("score file holds no scores", 0)
    return StreamScores(modality, ids, np.array(rows))


def save_scores(stream: StreamScores, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(encode_scores(stream))


def load_scores(path, modality: Optional[str] = None) -> StreamScores:
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    if modality is None:
        stem = str(path).replace("\\", "/").rsplit("/", 1)[-1].split(".")[0]
        modality = stem if stem in MODALITIES else "joint"
    return decode_scores(text, modality)


def stream_scores(model: Model, samples: Sequence[SkeletonSequence], ids: Sequence[str],
                  modality: str = "joint") -> StreamScores:
    return StreamScores(modality, list(ids), predict_logits(model, samples))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class FusionResult:
    ids: List[str]
    fused: np.ndarray
    predictions: np.ndarray


def fuse_scores(streams: Sequence[StreamScores], weights: Optional[Sequence[float]] = None) -> FusionResult:
    """``sum_s w_s * softmax(scores_s)`` and its argmax."""
    if not streams:
        raise ContractError("no streams to fuse")
    weights = [1.0] * len(streams) if weights is None else [float(w) for w in weights]
    if len(weights) != len(streams):
        raise ContractError(f"{len(weights)} weights for {len(streams)} streams")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ContractError("weights must be non-negative and not all zero")
    ref = streams[0]
    for s in streams[1:]:
        if s.ids != ref.ids:
            raise ContractError(f"stream {s.modality!r} covers different samples than {ref.modality!r}")
        if s.scores.shape != ref.scores.shape:
            raise ContractError(f"stream {s.modality!r} has {s.scores.shape[1]} classes, expected {ref.scores.shape[1]}")
    fused = sum(w * _softmax(s.scores) for w, s in zip(weights, streams))
    return FusionResult(list(ref.ids), fused, np.argmax(fused, axis=1))


def accuracy(predictions: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.shape != np.shape(predictions):
        raise ContractError("predictions and labels differ in length")
    return float(np.mean(np.asarray(predictions) == labels))
