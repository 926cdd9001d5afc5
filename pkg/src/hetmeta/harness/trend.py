"""Three-way comparison on a synthetic heterogeneous task distribution.

Trains HetMAML, the padded-input MAML baseline and Multi-MAML(BF) on the same
class bank with the same total number of outer steps, then records adaptation
curves on shared meta-test tasks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..hetmaml import (
    HETMAML,
    MAML,
    MULTI_MAML_BF,
    AdaptationTrace,
    MetaModel,
    TrainConfig,
    evaluate,
    evaluate_bf,
    meta_train,
    multi_maml_bf_train,
    split_budget,
)
from ..nn import Architecture
from ..tasks import HTDSpec, SyntheticSource, make_class_bank


@dataclass(frozen=True)
class TrendSettings:
    modality_dims: tuple[int, ...] = (16, 12)
    task_types: tuple[tuple[int, ...], ...] = ((1, 0), (0, 1), (1, 1))
    classes: int = 40
    separation: float = 4.0
    noise: float = 1.0
    n_way: int = 5
    k_shot: int = 1
    k_query: int = 12
    f1: int = 32
    f2: int = 16
    f3: int = 8
    iterations: int = 5000
    meta_batch: int = 2
    train_inner_steps: int = 5
    eval_inner_steps: int = 10
    alpha: float = 0.3
    beta: float = 1e-3
    optimizer: str = "adam"
    second_order: bool = False
    test_tasks: int = 300

    def spec(self) -> HTDSpec:
        return HTDSpec(self.modality_dims, self.task_types, None, self.n_way, self.k_shot, self.k_query)

    def arch(self) -> Architecture:
        return Architecture(self.modality_dims, self.f1, self.f2, self.f3, self.n_way)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, beta=self.beta, inner_steps=self.train_inner_steps,
                           meta_batch=self.meta_batch, iterations=self.iterations,
                           second_order=self.second_order, seed=seed, optimizer=self.optimizer)

    def eval_config(self) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, inner_steps=self.eval_inner_steps)


@dataclass
class MethodResult:
    trace: AdaptationTrace
    seconds: float

    @property
    def overall(self) -> float:
        return float(self.trace.mean_acc()[-1])

    def per_type(self) -> dict[int, float]:
        return {k: float(v[-1]) for k, v in self.trace.type_acc().items()}


@dataclass
class SeedResult:
    seed: int
    methods: dict[str, MethodResult] = field(default_factory=dict)


def run_seed(seed: int, settings: TrendSettings = TrendSettings()) -> SeedResult:
    spec = settings.spec()
    bank = make_class_bank(spec.M, spec.modality_dims, settings.classes, settings.separation,
                           np.random.default_rng(seed))
    train = SyntheticSource(spec, bank, "train", settings.noise)
    test_src = SyntheticSource(spec, bank, "test", settings.noise)
    test_rng = np.random.default_rng([seed, 1])
    test_tasks = [test_src(test_rng) for _ in range(settings.test_tasks)]
    cfg = settings.train_config(seed)
    ecfg = settings.eval_config()
    out = SeedResult(seed)

    for kind in (HETMAML, MAML):
        t0 = time.perf_counter()
        model, _ = meta_train(MetaModel.create(settings.arch(), seed, kind), train, cfg)
        trace = evaluate(model, test_tasks, ecfg)
        out.methods[kind] = MethodResult(trace, time.perf_counter() - t0)

    t0 = time.perf_counter()
    streams = {r: SyntheticSource(spec, bank, "train", settings.noise, r) for r in range(len(spec.task_types))}
    bf, _ = multi_maml_bf_train(spec, streams, cfg, settings.f1, settings.f2, settings.f3,
                                iterations=split_budget(settings.iterations, spec.type_weights))
    out.methods[MULTI_MAML_BF] = MethodResult(evaluate_bf(bf, test_tasks, ecfg), time.perf_counter() - t0)
    return out


def median_over_seeds(results: list[SeedResult], kind: str, value) -> float:
    return float(np.median([value(r.methods[kind]) for r in results]))
