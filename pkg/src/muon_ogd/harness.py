"""Desk-scale continual learning: synthetic task streams, a small dense model,
sequential training and the average-accuracy / backward-transfer metrics."""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .constraints import EMPTY, ProtectedRankPolicy, extract_lowrank_constraints, lowrank_as_general
from .errors import DomainError, NumericalError, StateError
from .optim import Kind, OptimizerState, ParamGroup, step


# -- task streams -------------------------------------------------------------


class Generator(str, enum.Enum):
    ROTATED_REGRESSION = "rotated_regression"
    SUBSPACE_CLASSIFICATION = "subspace_classification"
    PERMUTED_PATTERNS = "permuted_patterns"


@dataclass(frozen=True)
class Task:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classification: bool = False
    # ground-truth linear map for regression tasks (rows = outputs)
    target: np.ndarray | None = None

    def __post_init__(self):
        if len(self.x_train) < 1 or len(self.x_test) < 1:
            raise ValueError(f"task {self.name} needs at least one train and one test example")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple
    generator: Generator
    seed: int

    @property
    def n_in(self) -> int:
        return self.tasks[0].x_train.shape[1]

    @property
    def n_out(self) -> int:
        t = self.tasks[0]
        return int(t.y_train.max()) + 1 if t.classification else t.y_train.shape[1]

    def __len__(self):
        return len(self.tasks)


def _haar_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _rotation(rng: np.random.Generator, n: int, angle: float | None) -> np.ndarray:
    if angle is None:
        return _haar_orthogonal(rng, n)
    k = rng.standard_normal((n, n))
    k = k - k.T
    k /= np.linalg.norm(k, 2)
    return expm(angle * k)


def rotated_regression(
    n_tasks: int = 2,
    dim: int = 16,
    rank: int = 2,
    n_train: int = 256,
    n_test: int = 256,
    noise: float = 0.01,
    angle: float | None = None,
    seed: int = 0,
) -> TaskStream:
    """Linear regression tasks ``y = W_t x + noise`` with ``x ~ N(0, I)`` shared.

    ``W_1 = A diag(s) B^T`` has rank ``rank`` with distinct singular values;
    later tasks rotate the output side, ``W_t = Q_t W_1``, so each task's
    solution lives on the same row space but a different column space.
    ``Q_t`` is Haar-random when ``angle`` is None, else ``expm(angle * K)``
    for a random skew ``K`` with ``||K||_2 = 1`` (largest plane rotation = angle).
    """
    if not 1 <= rank <= dim:
        raise ValueError(f"rank must lie in [1, {dim}]")
    if angle is not None and not angle >= 0:
        raise ValueError(f"angle must be non-negative, got {angle}")
    rng = np.random.default_rng(seed)
    a = _haar_orthogonal(rng, dim)[:, :rank]
    b = _haar_orthogonal(rng, dim)[:, :rank]
    s = np.linspace(2.0, 1.0, rank) if rank > 1 else np.array([2.0])
    base = (a * s) @ b.T
    tasks = []
    for t in range(n_tasks):
        w = base if t == 0 else _rotation(rng, dim, angle) @ base
        xs = [rng.standard_normal((n, dim)) for n in (n_train, n_test)]
        ys = [x @ w.T + noise * rng.standard_normal((len(x), dim)) for x in xs]
        tasks.append(Task(f"task{t + 1}", xs[0], ys[0], xs[1], ys[1], target=w))
    return TaskStream(tuple(tasks), Generator.ROTATED_REGRESSION, seed)


def subspace_classification(
    n_tasks: int = 2,
    dim: int = 16,
    rank: int = 2,
    n_classes: int = 4,
    n_train: int = 256,
    n_test: int = 256,
    noise: float = 0.3,
    seed: int = 0,
) -> TaskStream:
    """Each task draws class means inside its own random ``rank``-dim input subspace."""
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        basis = _haar_orthogonal(rng, dim)[:, :rank]
        means = 2.0 * rng.standard_normal((n_classes, rank)) @ basis.T
        split = []
        for n in (n_train, n_test):
            y = rng.integers(0, n_classes, size=n)
            x = means[y] + noise * rng.standard_normal((n, dim))
            split += [x, y]
        tasks.append(Task(f"task{t + 1}", *split, classification=True))
    return TaskStream(tuple(tasks), Generator.SUBSPACE_CLASSIFICATION, seed)


def permuted_patterns(
    n_tasks: int = 2,
    dim: int = 16,
    n_classes: int = 4,
    n_train: int = 256,
    n_test: int = 256,
    noise: float = 0.5,
    seed: int = 0,
) -> TaskStream:
    """Noisy class prototypes shared by all tasks; task ``t`` permutes input coordinates."""
    rng = np.random.default_rng(seed)
    protos = rng.choice([-1.0, 1.0], size=(n_classes, dim))
    tasks = []
    for t in range(n_tasks):
        perm = np.arange(dim) if t == 0 else rng.permutation(dim)
        split = []
        for n in (n_train, n_test):
            y = rng.integers(0, n_classes, size=n)
            x = (protos[y] + noise * rng.standard_normal((n, dim)))[:, perm]
            split += [x, y]
        tasks.append(Task(f"task{t + 1}", *split, classification=True))
    return TaskStream(tuple(tasks), Generator.PERMUTED_PATTERNS, seed)


GENERATORS: dict[Generator, Callable[..., TaskStream]] = {
    Generator.ROTATED_REGRESSION: rotated_regression,
    Generator.SUBSPACE_CLASSIFICATION: subspace_classification,
    Generator.PERMUTED_PATTERNS: permuted_patterns,
}


def make_stream(generator: Generator | str, **kwargs) -> TaskStream:
    return GENERATORS[Generator(generator)](**kwargs)


# -- model --------------------------------------------------------------------


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    TANH = "tanh"
    RELU = "relu"


class Loss(str, enum.Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - a * a
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass(frozen=True)
class ToyModel:
    """Dense network ``x -> act(W_1 x + b_1) -> ... -> W_L h + b_L``.

    Weights are named ``w{i}`` and biases ``b{i}``; weights take the
    constrained update rule, biases plain momentum SGD.
    """

    params: tuple
    activation: Activation = Activation.IDENTITY
    loss: Loss = Loss.SQUARED_ERROR

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        activation: Activation | str = Activation.IDENTITY,
        loss: Loss | str = Loss.SQUARED_ERROR,
        init_scale: float = 0.1,
        seed: int = 0,
    ) -> "ToyModel":
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = np.random.default_rng(seed)
        params = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            w = init_scale * rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
            params.append(ParamGroup(f"w{i}", w))
            params.append(ParamGroup(f"b{i}", np.zeros(n_out), apply_constrained=False))
        return cls(tuple(params), Activation(activation), Loss(loss))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def weight(self, name: str) -> np.ndarray:
        for p in self.params:
            if p.name == name:
                return p.weight
        raise KeyError(name)

    def with_params(self, params: Sequence[ParamGroup]) -> "ToyModel":
        return replace(self, params=tuple(params))

    def _forward(self, x: np.ndarray):
        cache = []
        h = x
        for i in range(self.n_layers):
            w, b = self.params[2 * i].weight, self.params[2 * i + 1].weight
            z = h @ w.T + b
            last = i == self.n_layers - 1
            a = z if last else _act(self.activation, z)
            cache.append((h, z, a))
            h = a
        return h, cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x)[0]

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
        out, cache = self._forward(x)
        n = x.shape[0]
        if self.loss is Loss.CROSS_ENTROPY:
            z = out - out.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss = -float(np.mean(logp[np.arange(n), y]))
            d = np.exp(logp)
            d[np.arange(n), y] -= 1.0
            d /= n
        else:
            r = out - y
            loss = 0.5 * float(np.sum(r * r)) / n
            d = r / n
        grads = {}
        for i in reversed(range(self.n_layers)):
            h, z, a = cache[i]
            if i != self.n_layers - 1:
                d = d * _act_grad(self.activation, z, a)
            grads[f"w{i + 1}"] = d.T @ h
            grads[f"b{i + 1}"] = d.sum(axis=0)
            d = d @ self.params[2 * i].weight
        return loss, grads

    def score(self, task: Task) -> float:
        """Accuracy for classification tasks, ``exp(-MSE)`` for regression."""
        out = self.predict(task.x_test)
        if task.classification:
            return float(np.mean(out.argmax(axis=1) == task.y_test))
        return math.exp(-float(np.mean((out - task.y_test) ** 2)))


# -- metrics ------------------------------------------------------------------


@dataclass
class AccuracyLog:
    """``a[t, i]`` is the score on task ``i`` after training through task ``t``.

    Unmeasured cells hold NaN. ``baseline[i]`` is the untrained model's score.
    """

    a: np.ndarray
    baseline: np.ndarray | None = None

    @classmethod
    def empty(cls, n_tasks: int) -> "AccuracyLog":
        return cls(np.full((n_tasks, n_tasks), np.nan))

    @classmethod
    def from_diag_final(cls, diag: Sequence[float], final: Sequence[float]) -> "AccuracyLog":
        """Log holding only just-after-training scores and the final row."""
        if len(diag) != len(final):
            raise ValueError("diag and final must have the same length")
        log = cls.empty(len(final))
        log.a[np.arange(len(diag)), np.arange(len(diag))] = diag
        log.a[-1, :] = final
        return log

    @property
    def n_tasks(self) -> int:
        return self.a.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.a[-1]

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.a).copy()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task{i + 1}" for i in range(self.n_tasks)])
        for t, row in enumerate(self.a):
            w.writerow([t + 1] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyLog":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        return cls(np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows]))

    def summary(self) -> dict:
        return {
            "aa": average_accuracy(self),
            "bt": backward_transfer(self) if self.n_tasks > 1 else None,
            "per_task_final": [float(v) for v in self.final],
            "per_task_diag": [float(v) for v in self.diag],
        }


def average_accuracy(log: AccuracyLog) -> float:
    final = log.final
    if np.any(np.isnan(final)):
        raise StateError("final row of the accuracy log is incomplete")
    return float(np.mean(final))


def backward_transfer(log: AccuracyLog) -> float:
    t = log.n_tasks
    if t < 2:
        raise DomainError("backward transfer needs at least two tasks")
    final, diag = log.final[:-1], log.diag[:-1]
    if np.any(np.isnan(final)) or np.any(np.isnan(diag)):
        raise StateError("accuracy log is missing diagonal or final-row entries")
    return float(np.sum(final - diag) / (t - 1))


# -- curriculum ---------------------------------------------------------------


def refresh_constraints(model: ToyModel, kind: Kind, policy: ProtectedRankPolicy) -> ToyModel:
    """Protect the top singular subspaces of each constrained weight.

    All-zero weights carry no subspace and get an empty constraint set.
    ``muon_ogd`` receives the enumerated rank-one form, the other kinds the
    bilinear ``(U, V)`` form.
    """
    params = []
    for p in model.params:
        if p.apply_constrained:
            try:
                cs = extract_lowrank_constraints(p.weight, policy)
            except DomainError:
                cs = EMPTY
            else:
                if kind is Kind.MUON_OGD:
                    cs = lowrank_as_general(cs)
            p = replace(p, constraints=cs)
        params.append(p)
    return model.with_params(params)


@dataclass
class CurriculumResult:
    log: AccuracyLog
    model: ToyModel
    residuals: list = field(default_factory=list)
    deltas: list = field(default_factory=list)


def run_curriculum(
    model: ToyModel,
    stream: TaskStream,
    opt: OptimizerState,
    steps_per_task: int,
    policy: ProtectedRankPolicy | None = None,
    batch_size: int | None = None,
    seed: int = 0,
    record_steps: bool = False,
) -> CurriculumResult:
    """Train on each task in order and evaluate every task seen so far.

    Constraints are refreshed from the current weights at each task boundary
    (constrained kinds only); duals restart from zero after a refresh.
    ``record_steps`` keeps every constrained step's residual and update.
    """
    if steps_per_task < 0:
        raise ValueError("steps_per_task must be non-negative")
    policy = policy or ProtectedRankPolicy()
    rng = np.random.default_rng(seed)
    log = AccuracyLog.empty(len(stream))
    log.baseline = np.array([model.score(t) for t in stream.tasks])
    result = CurriculumResult(log, model)
    for t, task in enumerate(stream.tasks):
        if opt.kind.constrained:
            model = refresh_constraints(model, opt.kind, policy)
            opt.reset_dual()
        n = len(task.x_train)
        for it in range(steps_per_task):
            if batch_size is None or batch_size >= n:
                xb, yb = task.x_train, task.y_train
            else:
                idx = rng.choice(n, size=batch_size, replace=False)
                xb, yb = task.x_train[idx], task.y_train[idx]
            loss, grads = model.loss_and_grads(xb, yb)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss on {task.name} at step {it}: {loss}")
            before = {p.name: p.weight for p in model.params}
            params, opt = step(opt, model.params, grads)
            model = model.with_params(params)
            if record_steps:
                for p in model.params:
                    if p.apply_constrained:
                        result.deltas.append((t, p.name, p.weight - before[p.name], p.constraints))
                for name, res in opt.last_steps.items():
                    result.residuals.append((t, name, res.residual))
        for i in range(t + 1):
            log.a[t, i] = model.score(stream.tasks[i])
    result.model = model
    return result
