"""HetMAML meta-learner plus the MAML (padded input) and Multi-MAML(BF) baselines.

Parameters are split into an internal group (BiLSTM and head), adapted per
task in the inner loop, and an external group (backbone channels, task
embedding, attention), frozen in the inner loop and updated only by the outer
loop. The outer loop differentiates the query loss at the adapted parameters
with respect to both groups, through the inner loop when ``second_order`` is
set.
"""

from __future__ import annotations

import logging
import multiprocessing
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tape, Tensor, cross_entropy_loss
from .nn import INTERNAL, Architecture, ParamSet
from .tasks import DEFAULT_EPSILON, HTDSpec, LabeledSample, SampleSet, TaskInstance, compute_config_vector

log = logging.getLogger(__name__)

HETMAML = "hetmaml"
MAML = "maml"
MULTI_MAML_BF = "multi-maml-bf"


@dataclass
class TrainConfig:
    alpha: float = 1e-2
    beta: float = 1e-4
    inner_steps: int = 10
    meta_batch: int = 4
    iterations: int = 1000
    second_order: bool = True
    seed: int = 0
    optimizer: str = "sgd"
    epsilon: float = DEFAULT_EPSILON
    workers: int = 1

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta >= 0):
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0 or self.meta_batch < 1 or self.iterations < 0:
            raise ValueError("inner_steps >= 0, meta_batch >= 1 and iterations >= 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


# ---------------------------------------------------------------------------
# Models


def maml_param_shapes(arch: Architecture) -> list[tuple[str, tuple, str]]:
    """Single-channel MLP D_max -> F1 -> F1 -> F2 -> N_way; everything is adapted."""
    dims = (max(arch.modality_dims), arch.f1, arch.f1, arch.f2, arch.n_way)
    return [(n, s, INTERNAL) for n, s in nn._linear_shapes("net", dims)]


def homogenize(xs: Sequence, c: Sequence[int], dims: Sequence[int]) -> np.ndarray:
    """Zero-pad every present modality to the largest dimension and sum them."""
    d_max = max(dims)
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in xs]
    out = np.zeros((xs[0].shape[0], d_max))
    for m, x in enumerate(xs):
        if x.shape[1] != dims[m]:
            raise ShapeError(f"homogenize: modality {m} has dimension {x.shape[1]}, expected {dims[m]}")
        if c[m]:
            out[:, : dims[m]] += x
    return out


class MetaModel:
    """Architecture plus parameters.

    ``encode`` runs the external part on one sample set (backbone and task
    embedding for HetMAML, input homogenisation for MAML); ``decode`` runs the
    internal part on the encoding. Splitting them lets the inner loop reuse a
    single encoding of the support set.
    """

    def __init__(self, arch: Architecture, params: ParamSet, kind: str = HETMAML):
        if kind not in (HETMAML, MAML):
            raise ValueError(f"unknown model kind {kind!r}")
        self.arch = arch
        self.params = params
        self.kind = kind

    @classmethod
    def create(cls, arch: Architecture, seed: int, kind: str = HETMAML) -> "MetaModel":
        shapes = nn.param_shapes(arch) if kind == HETMAML else maml_param_shapes(arch)
        return cls(arch, nn.init_from_shapes(shapes, seed), kind)

    def copy(self) -> "MetaModel":
        return MetaModel(self.arch, self.params.copy(), self.kind)

    def encode(self, external: Mapping[str, Tensor], xs: Sequence, c: Sequence[int]):
        if self.kind == MAML:
            return Tensor(homogenize(xs, c, self.arch.modality_dims))
        try:
            Z = nn.backbone_forward(nn.backbone_view(external, self.arch.M), xs, c)
        except ShapeError as e:
            raise ShapeError(f"backbone stage: {e}") from None
        try:
            tau = nn.task_embed(nn.tfan_view(external, with_lstm=False), c)
        except ShapeError as e:
            raise ShapeError(f"task-embedding stage: {e}") from None
        return Z, tau

    def decode(self, internal: Mapping[str, Tensor], external: Mapping[str, Tensor], ctx) -> Tensor:
        if self.kind == MAML:
            return nn.mlp(nn._linears(internal, "net"), ctx)
        Z, tau = ctx
        tfan = nn.tfan_view({**internal, **external})
        try:
            H = nn.iterative_aggregate(tfan, Z)
        except ShapeError as e:
            raise ShapeError(f"iterative-aggregation stage: {e}") from None
        try:
            h_star, _ = nn.attention_aggregate(tfan, H, tau)
        except ShapeError as e:
            raise ShapeError(f"attention stage: {e}") from None
        try:
            return nn.head_forward(nn.head_view(internal), h_star)
        except ShapeError as e:
            raise ShapeError(f"head stage: {e}") from None

    def logits(self, internal, external, xs, c) -> Tensor:
        return self.decode(internal, external, self.encode(external, xs, c))


def _sample_xs(sample) -> list:
    if isinstance(sample, LabeledSample):
        return list(sample.modalities)
    if isinstance(sample, SampleSet):
        return list(sample.xs)
    return list(sample)


def forward(model: MetaModel, internal: Mapping[str, Tensor], external: Mapping[str, Tensor], sample, c) -> Tensor:
    """Logits for one sample (``[N_way]``) or a batch (``[B, N_way]``)."""
    xs = _sample_xs(sample)
    single = all(np.ndim(x.data if isinstance(x, Tensor) else x) == 1 for x in xs)
    logits = model.logits(internal, external, xs, c)
    if single and logits.ndim == 2:
        return ad.reshape(logits, (logits.shape[1],))
    return logits


def baseline_maml_forward(params: Mapping[str, Tensor], sample, spec: HTDSpec, c=None) -> Tensor:
    """Padded-and-summed single-channel MAML forward pass."""
    xs = _sample_xs(sample)
    c = [1] * spec.M if c is None else c
    x = homogenize(xs, c, spec.modality_dims)
    out = nn.mlp(nn._linears(params, "net"), Tensor(x))
    return ad.reshape(out, (out.shape[1],)) if x.shape[0] == 1 and np.ndim(xs[0]) == 1 else out


# ---------------------------------------------------------------------------
# Inner loop


def _adapt(model, theta, phi, ctx, y, alpha, steps, create_graph, on_step=None):
    names = list(theta)
    alpha_t = Tensor(alpha)
    for step in range(steps):
        with Tape() as tape:
            vals = [theta[n] for n in names]
            tape.watch(*vals)
            loss = cross_entropy_loss(model.decode(theta, phi, ctx), y)
        grads = tape.gradient(loss, vals)
        if create_graph:
            theta = {n: ad.sub(theta[n], ad.mul(alpha_t, g)) for n, g in zip(names, grads)}
        else:
            theta = {n: Tensor(theta[n].data - alpha * g.data) for n, g in zip(names, grads)}
        if on_step is not None:
            on_step(step + 1, theta)
    return theta


def inner_adapt(
    model: MetaModel,
    task: TaskInstance,
    cfg: TrainConfig,
    internal: Mapping[str, Tensor] | None = None,
    external: Mapping[str, Tensor] | None = None,
) -> dict[str, Tensor]:
    """Full-batch gradient steps on the support loss, internal parameters only.

    With ``cfg.second_order`` the updates are built from recorded primitives,
    so under an enclosing tape the result stays differentiable in the initial
    values.
    """
    internal = dict(model.params.internal() if internal is None else internal)
    external = dict(model.params.external() if external is None else external)
    c = compute_config_vector(task.support, cfg.epsilon)
    ctx = model.encode(external, task.support.xs, c)
    return _adapt(model, internal, external, ctx, task.support.y, cfg.alpha, cfg.inner_steps, cfg.second_order)


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    # argmax picks the lowest index on ties
    return float(np.mean(np.argmax(logits, axis=-1) == y))


def task_meta_gradient(model: MetaModel, task: TaskInstance, cfg: TrainConfig, c=None):
    """Gradient of one task's query loss at its adapted parameters.

    Returns ``(grads, loss, acc)`` with ``grads`` keyed by parameter name.
    """
    if c is None:
        c = compute_config_vector(task.support, cfg.epsilon)
    theta0 = {n: Tensor(t.data) for n, t in model.params.internal().items()}
    phi = {n: Tensor(t.data) for n, t in model.params.external().items()}
    if cfg.second_order:
        with Tape() as outer:
            outer.watch(*theta0.values(), *phi.values())
            sctx = model.encode(phi, task.support.xs, c)
            theta = _adapt(model, theta0, phi, sctx, task.support.y, cfg.alpha, cfg.inner_steps, True)
            logits = model.decode(theta, phi, model.encode(phi, task.query.xs, c))
            loss = cross_entropy_loss(logits, task.query.y)
        gm = ad.backward(outer, loss)
        grads = {n: gm[t].data for n, t in theta0.items()}
    else:
        sctx = model.encode(phi, task.support.xs, c)
        theta = _adapt(model, theta0, phi, sctx, task.support.y, cfg.alpha, cfg.inner_steps, False)
        with Tape() as tape:
            tape.watch(*theta.values(), *phi.values())
            logits = model.decode(theta, phi, model.encode(phi, task.query.xs, c))
            loss = cross_entropy_loss(logits, task.query.y)
        gm = ad.backward(tape, loss)
        grads = {n: gm[t].data for n, t in theta.items()}
    grads.update({n: gm[t].data for n, t in phi.items()})
    return grads, loss.item(), _accuracy(logits.data, task.query.y)


def bilevel_objective(model: MetaModel, task: TaskInstance, cfg: TrainConfig, values: Mapping[str, np.ndarray] | None = None) -> float:
    """Query loss after inner adaptation, evaluated without any tape."""
    params = model.params if values is None else model.params.replace(values)
    c = compute_config_vector(task.support, cfg.epsilon)
    theta, phi = params.internal(), params.external()
    theta = _adapt(model, theta, phi, model.encode(phi, task.support.xs, c), task.support.y,
                   cfg.alpha, cfg.inner_steps, False)
    logits = model.decode(theta, phi, model.encode(phi, task.query.xs, c))
    return cross_entropy_loss(logits, task.query.y).item()


# ---------------------------------------------------------------------------
# Outer loop


class OuterOptimizer:
    """Plain SGD (default) or Adam on the meta-parameters.

    Adam leaves a tensor and its moment estimates untouched in steps where the
    tensor's gradient is exactly zero, so channels of absent modalities are
    never moved.
    """

    def __init__(self, lr: float, kind: str = "sgd", b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.kind, self.b1, self.b2, self.eps = lr, kind, b1, b2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        new = {}
        for n, g in grads.items():
            p = params[n].data
            if self.kind == "sgd":
                new[n] = p - self.lr * g
                continue
            if not np.any(g):
                continue
            m, v, t = self.state.get(n, (np.zeros_like(p), np.zeros_like(p), 0))
            t += 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[n] = (m, v, t)
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            new[n] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params.replace(new)


def _worker_grad(args):
    kind, arch, arrays, tags, task, cfg = args
    model = MetaModel(arch, ParamSet({n: Tensor(a) for n, a in arrays.items()}, tags), kind)
    return task_meta_gradient(model, task, cfg)


@dataclass
class StepMetrics:
    loss: float
    acc: float
    type_acc: dict[int, float]
    n_tasks: int
    skipped: int


def outer_step(
    model: MetaModel,
    batch: Sequence[TaskInstance],
    cfg: TrainConfig,
    optimizer: OuterOptimizer | None = None,
    pool=None,
) -> StepMetrics:
    """One meta-update of the internal initialisation and the external parameters.

    Both groups move from the same pre-update snapshot using the summed query
    losses of the batch. Tasks whose config vector is all zero are skipped.
    """
    if not batch:
        raise ValueError("outer_step: empty batch")
    optimizer = optimizer or OuterOptimizer(cfg.beta, cfg.optimizer)
    kept, cs = [], []
    for task in batch:
        c = compute_config_vector(task.support, cfg.epsilon)
        if any(c):
            kept.append(task)
            cs.append(c)
    skipped = len(batch) - len(kept)
    if not kept:
        return StepMetrics(float("nan"), float("nan"), {}, 0, skipped)
    if pool is not None:
        arrays = model.params.arrays()
        jobs = [(model.kind, model.arch, arrays, model.params.tags, t, cfg) for t in kept]
        results = pool.map(_worker_grad, jobs)
    else:
        results = [task_meta_gradient(model, t, cfg, c) for t, c in zip(kept, cs)]
    total = {n: np.zeros_like(t.data) for n, t in model.params.tensors.items()}
    for grads, _, _ in results:
        for n, g in grads.items():
            total[n] += g
    model.params = optimizer.step(model.params, total)
    per_type: dict[int, list[float]] = {}
    for task, (_, _, acc) in zip(kept, results):
        per_type.setdefault(task.type_id, []).append(acc)
    return StepMetrics(
        loss=float(np.mean([r[1] for r in results])),
        acc=float(np.mean([r[2] for r in results])),
        type_acc={k: float(np.mean(v)) for k, v in sorted(per_type.items())},
        n_tasks=len(kept),
        skipped=skipped,
    )


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    skipped_tasks: int = 0


def _make_pool(workers: int):
    if workers <= 1:
        return None
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    return ctx.Pool(workers)


def meta_train(
    model: MetaModel,
    task_source: Callable[[np.random.Generator], TaskInstance],
    cfg: TrainConfig,
    n_types: int | None = None,
    callback: Callable[[int, StepMetrics], None] | None = None,
) -> tuple[MetaModel, TrainLog]:
    """Run ``cfg.iterations`` outer steps on batches drawn from ``task_source``.

    Task sampling uses its own generator seeded from ``cfg.seed``, so a run is
    fully determined by the initial parameters, the source, and ``cfg``.
    """
    if n_types is None:
        spec = getattr(task_source, "spec", None)
        n_types = len(spec.task_types) if spec is not None else 0
    rng = np.random.default_rng(cfg.seed)
    opt = OuterOptimizer(cfg.beta, cfg.optimizer)
    out = TrainLog()
    pool = _make_pool(cfg.workers)
    try:
        for it in range(cfg.iterations):
            batch = [task_source(rng) for _ in range(cfg.meta_batch)]
            m = outer_step(model, batch, cfg, opt, pool)
            out.skipped_tasks += m.skipped
            row = {"iteration": it + 1, "mean_query_loss": m.loss, "mean_query_acc": m.acc}
            for k in range(n_types):
                row[f"acc_type_{k}"] = m.type_acc.get(k, float("nan"))
            out.rows.append(row)
            if callback is not None:
                callback(it + 1, m)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    if out.skipped_tasks:
        log.info("skipped %d tasks with no informative modality", out.skipped_tasks)
    return model, out


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class AdaptationTrace:
    """Query accuracy/loss after 0..inner_steps adaptation steps, per task."""

    acc: np.ndarray  # [n_tasks, steps + 1]
    loss: np.ndarray
    type_ids: np.ndarray

    @property
    def steps(self) -> int:
        return self.acc.shape[1] - 1

    def mean_acc(self) -> np.ndarray:
        return self.acc.mean(axis=0)

    def mean_loss(self) -> np.ndarray:
        return self.loss.mean(axis=0)

    def type_acc(self) -> dict[int, np.ndarray]:
        return {int(k): self.acc[self.type_ids == k].mean(axis=0) for k in np.unique(self.type_ids)}

    def type_counts(self) -> dict[int, int]:
        return {int(k): int(np.sum(self.type_ids == k)) for k in np.unique(self.type_ids)}

    @staticmethod
    def concat(traces: Sequence["AdaptationTrace"]) -> "AdaptationTrace":
        return AdaptationTrace(
            np.concatenate([t.acc for t in traces]),
            np.concatenate([t.loss for t in traces]),
            np.concatenate([t.type_ids for t in traces]),
        )


def evaluate_task(model: MetaModel, task: TaskInstance, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    c = compute_config_vector(task.support, cfg.epsilon)
    phi = model.params.external()
    theta = model.params.internal()
    qctx = model.encode(phi, task.query.xs, c)
    accs = np.empty(cfg.inner_steps + 1)
    losses = np.empty(cfg.inner_steps + 1)

    def record(step, th):
        logits = model.decode(th, phi, qctx)
        accs[step] = _accuracy(logits.data, task.query.y)
        losses[step] = cross_entropy_loss(logits, task.query.y).item()

    record(0, theta)
    _adapt(model, theta, phi, model.encode(phi, task.support.xs, c), task.support.y,
           cfg.alpha, cfg.inner_steps, False, record)
    return accs, losses


def evaluate(model: MetaModel, tasks: Sequence[TaskInstance], cfg: TrainConfig) -> AdaptationTrace:
    """Adaptation curve over meta-test tasks (first-order adaptation, no tape)."""
    accs, losses = [], []
    for task in tasks:
        a, l = evaluate_task(model, task, cfg)
        accs.append(a)
        losses.append(l)
    n = cfg.inner_steps + 1
    return AdaptationTrace(
        np.array(accs).reshape(-1, n),
        np.array(losses).reshape(-1, n),
        np.array([t.type_id for t in tasks], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Multi-MAML(BF)


def _sub_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence([seed, r]).generate_state(1)[0])


class MultiMAMLBF:
    """One independent HetMAML-architecture model per task type.

    The model for a type only has backbone channels for that type's
    modalities and always sees an all-ones config vector.
    """

    def __init__(self, spec: HTDSpec, models: Mapping[int, MetaModel]):
        self.spec = spec
        self.models = dict(models)

    @staticmethod
    def modalities(spec: HTDSpec, type_id: int) -> list[int]:
        return [m for m, v in enumerate(spec.task_types[type_id]) if v]

    @classmethod
    def create(cls, spec: HTDSpec, f1: int, f2: int, f3: int, seed: int) -> "MultiMAMLBF":
        models = {}
        for r, mask in enumerate(spec.task_types):
            dims = [spec.modality_dims[m] for m in cls.modalities(spec, r)]
            arch = Architecture(tuple(dims), f1, f2, f3, spec.n_way)
            models[r] = MetaModel.create(arch, _sub_seed(seed, r), HETMAML)
        return cls(spec, models)

    def restrict(self, task: TaskInstance, epsilon: float = DEFAULT_EPSILON) -> TaskInstance:
        return task.select(self.modalities(self.spec, task.type_id), epsilon)

    def param_count(self) -> int:
        return sum(m.params.count() for m in self.models.values())

    def named_params(self) -> ParamSet:
        tensors, tags = {}, {}
        for r, model in sorted(self.models.items()):
            for n, t in model.params.tensors.items():
                tensors[f"type{r}/{n}"] = t
                tags[f"type{r}/{n}"] = model.params.tags[n]
        return ParamSet(tensors, tags)


def split_budget(total: int, weights: Sequence[float]) -> dict[int, int]:
    """Split ``total`` outer steps across types by weight (largest remainder, ties to lower index)."""
    raw = [total * w for w in weights]
    base = [int(np.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda r: (-(raw[r] - base[r]), r))
    for r in order[: total - sum(base)]:
        base[r] += 1
    return dict(enumerate(base))


def multi_maml_bf_train(
    spec: HTDSpec,
    task_streams: Mapping[int, Callable[[np.random.Generator], TaskInstance]],
    cfg: TrainConfig,
    f1: int,
    f2: int,
    f3: int,
    callback=None,
    iterations: Mapping[int, int] | None = None,
) -> tuple[MultiMAMLBF, dict[int, TrainLog]]:
    """Train one model per task type, each only on its own stream.

    ``iterations`` gives each type's outer-step budget (default: ``cfg.iterations`` each).
    """
    if set(task_streams) != set(range(len(spec.task_types))):
        raise ValueError("need exactly one task stream per task type")
    bf = MultiMAMLBF.create(spec, f1, f2, f3, cfg.seed)
    logs = {}
    for r in range(len(spec.task_types)):
        stream = task_streams[r]
        idx = MultiMAMLBF.modalities(spec, r)

        def source(rng, stream=stream, r=r, idx=idx):
            task = stream(rng)
            if task.type_id != r:
                raise ValueError(f"stream for type {r} produced a type-{task.type_id} task")
            return task.select(idx, cfg.epsilon)

        sub_cfg = replace(cfg, seed=_sub_seed(cfg.seed, r))
        if iterations is not None:
            sub_cfg = replace(sub_cfg, iterations=int(iterations[r]))
        _, logs[r] = meta_train(bf.models[r], source, sub_cfg, n_types=len(spec.task_types),
                                callback=None if callback is None else (lambda it, m, r=r: callback(r, it, m)))
    return bf, logs


def evaluate_bf(bf: MultiMAMLBF, tasks: Sequence[TaskInstance], cfg: TrainConfig) -> AdaptationTrace:
    """Route each task to its type's model; rows keep the input task order."""
    n = cfg.inner_steps + 1
    accs = np.empty((len(tasks), n))
    losses = np.empty((len(tasks), n))
    for i, task in enumerate(tasks):
        accs[i], losses[i] = evaluate_task(bf.models[task.type_id], bf.restrict(task, cfg.epsilon), cfg)
    return AdaptationTrace(accs, losses, np.array([t.type_id for t in tasks], dtype=np.int64))
