"""Finite-difference gradient checks for the autodiff primitives, every network
block, the composed forward pass and the second-order meta-gradient.

Each check builds small random problems, differentiates a scalar (a random
projection of the block output) with the tape, and compares every coordinate
against a central difference. Both backward routes are exercised: the
plain-array sweep and the sweep through recorded primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..autodiff import Tape, Tensor
from ..hetmaml import HETMAML, MetaModel, TrainConfig, bilevel_objective, task_meta_gradient
from ..tasks import HTDSpec, make_class_bank, sample_synthetic_task

FD_STEP = 1e-6
LAYER_TOL = 1e-5
META_TOL = 1e-4
# Coordinates whose true derivative is below this are compared in absolute
# terms; central differences cannot resolve them to a relative 1e-5.
REL_FLOOR = 1e-4

# Tiny dimensions used by every layer check.
GC_DIMS = (3, 4, 2)
GC_F1, GC_F2, GC_F3, GC_NWAY = 4, 4, 3, 3
BACKENDS = ("array", "composite")


@dataclass
class Case:
    """A scalar function of named arrays, differentiated with respect to all of them."""

    inputs: dict[str, np.ndarray]
    fn: Callable[[Mapping[str, Tensor]], Tensor]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    cases: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float | None = None) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    floor = REL_FLOOR if floor is None else floor
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def central_difference(f: Callable[[dict[str, np.ndarray]], float], inputs: Mapping[str, np.ndarray],
                       step: float = FD_STEP) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(base)
            flat[i] = orig - step
            fm = f(base)
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def tape_gradient(case: Case, backend: str = "array") -> dict[str, np.ndarray]:
    leaves = {k: Tensor(v) for k, v in case.inputs.items()}
    with Tape() as tape:
        tape.watch(*leaves.values())
        y = case.fn(leaves)
    if backend == "composite":
        with ad.composite_backward():
            gm = ad.backward(tape, y)
    else:
        gm = ad.backward(tape, y)
    return {k: gm[t].data for k, t in leaves.items()}


def case_error(case: Case, backends: Sequence[str] = BACKENDS) -> float:
    numeric = central_difference(lambda vals: case.fn({k: Tensor(v) for k, v in vals.items()}).item(), case.inputs)
    worst = 0.0
    for backend in backends:
        analytic = tape_gradient(case, backend)
        for k in case.inputs:
            worst = max(worst, rel_error(analytic[k], numeric[k]))
    return worst


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``out``, so every output coordinate matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return ad.sum_(ad.mul(out, w))


def _uniform(rng, shape, scale=1.0):
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# Case builders. Each takes a seed and returns a list of cases.


def _primitive_cases(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    a = _uniform(rng, (3, 4))
    b = _uniform(rng, (3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    labels = rng.integers(0, 4, size=3)
    r = lambda t: _project(t, np.random.default_rng(seed + 1))
    return [
        Case({"a": a, "b": b}, lambda p: r(ad.add(p["a"], p["b"]))),
        Case({"a": a, "b": b[0]}, lambda p: r(ad.sub(p["a"], p["b"]))),
        Case({"a": a, "b": b}, lambda p: r(ad.mul(p["a"], p["b"]))),
        Case({"a": a, "b": pos}, lambda p: r(ad.div(p["a"], p["b"]))),
        Case({"a": a, "b": _uniform(rng, (4, 2))}, lambda p: r(ad.matmul(p["a"], p["b"]))),
        Case({"x": a, "w": _uniform(rng, (2, 4)), "b": _uniform(rng, (2,))},
             lambda p: r(ad.linear(p["x"], p["w"], p["b"]))),
        Case({"a": a, "b": b}, lambda p: r(ad.concat([p["a"], p["b"]], axis=1))),
        Case({"a": a, "b": b}, lambda p: r(ad.stack([p["a"], p["b"]], axis=1))),
        Case({"a": a}, lambda p: r(ad.slice_(p["a"], (slice(1, 3), slice(0, 4, 2))))),
        Case({"a": a}, lambda p: r(ad.transpose(p["a"]))),
        Case({"a": a}, lambda p: r(ad.reshape(p["a"], (2, 6)))),
        Case({"a": a}, lambda p: r(ad.sigmoid(p["a"]))),
        Case({"a": a}, lambda p: r(ad.tanh(p["a"]))),
        Case({"a": a}, lambda p: r(ad.exp(p["a"]))),
        Case({"a": pos}, lambda p: r(ad.log(p["a"]))),
        Case({"a": a}, lambda p: r(ad.sum_(p["a"], axis=0))),
        Case({"a": a[:, :1]}, lambda p: r(ad.broadcast_to(p["a"], (2, 3, 4)))),
        Case({"a": a}, lambda p: r(ad.softmax(p["a"]))),
        Case({"a": a}, lambda p: r(ad.log_softmax(p["a"]))),
        Case({"a": a}, lambda p: ad.cross_entropy_loss(p["a"], labels)),
    ]


def _gc_arch() -> nn.Architecture:
    return nn.Architecture(GC_DIMS, GC_F1, GC_F2, GC_F3, GC_NWAY)


def _perturbed_params(seed: int) -> dict[str, np.ndarray]:
    """Initial parameters with small noise on the biases (zero biases hide bugs)."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(_gc_arch(), seed).arrays()
    return {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}


def _prefixed(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def _linear_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    inputs = {"weight": _uniform(rng, (GC_F1, 3)), "bias": _uniform(rng, (GC_F1,)), "x": _uniform(rng, (5, 3))}
    w = rng.standard_normal((5, GC_F1))
    return [Case(inputs, lambda p: ad.sum_(ad.mul(nn.linear(nn.LinearParams(p["weight"], p["bias"]), p["x"]), Tensor(w))))]


def _lstm_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    params = _prefixed(_perturbed_params(seed), "tfan.fwd.")
    H = GC_F2 // 2
    inputs = {**params, "z": _uniform(rng, (3, GC_F1)), "h": _uniform(rng, (3, H)), "c": _uniform(rng, (3, H))}
    wh, wc = rng.standard_normal((3, H)), rng.standard_normal((3, H))

    def fn(p):
        cell = nn._lstm(p, "tfan.fwd")
        h, c = nn.lstm_cell(cell, p["z"], p["h"], p["c"])
        return ad.add(ad.sum_(ad.mul(h, Tensor(wh))), ad.sum_(ad.mul(c, Tensor(wc))))

    return [Case(inputs, fn)]


def _bilstm_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    params = _prefixed(_perturbed_params(seed), "tfan.")
    params = {k: v for k, v in params.items() if ".fwd." in k or ".bwd." in k}
    Zs = {f"z{m}": _uniform(rng, (3, GC_F1)) for m in range(len(GC_DIMS))}
    ws = [rng.standard_normal((3, GC_F2)) for _ in GC_DIMS]

    def fn(p):
        tf = nn.TfanParams(nn._lstm(p, "tfan.fwd"), nn._lstm(p, "tfan.bwd"), [], None, None)
        H = nn.iterative_aggregate(tf, [p[f"z{m}"] for m in range(len(GC_DIMS))])
        return ad.sum_(ad.stack([ad.sum_(ad.mul(h, Tensor(w))) for h, w in zip(H, ws)]))

    return [Case({**params, **Zs}, fn)]


def _embed_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    params = _prefixed(_perturbed_params(seed), "tfan.embed.")
    c = rng.integers(0, 2, size=len(GC_DIMS))
    w = rng.standard_normal(GC_F3)
    return [Case(params, lambda p: ad.sum_(ad.mul(nn.task_embed(nn.TfanParams(None, None, nn._linears(p, "tfan.embed"), None, None), c), Tensor(w))))]


def _attention_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    full = _perturbed_params(seed)
    inputs = {"tfan.attn_v": full["tfan.attn_v"], "tfan.attn_W": full["tfan.attn_W"], "tau": _uniform(rng, (GC_F3,))}
    inputs.update({f"h{m}": _uniform(rng, (3, GC_F2)) for m in range(len(GC_DIMS))})
    wh = rng.standard_normal((3, GC_F2))
    wa = rng.standard_normal((3, len(GC_DIMS)))

    def fn(p):
        tf = nn.TfanParams(None, None, [], p["tfan.attn_v"], p["tfan.attn_W"])
        h_star, A = nn.attention_aggregate(tf, [p[f"h{m}"] for m in range(len(GC_DIMS))], p["tau"])
        return ad.add(ad.sum_(ad.mul(h_star, Tensor(wh))), ad.sum_(ad.mul(A, Tensor(wa))))

    return [Case(inputs, fn)]


def _head_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    inputs = {**_prefixed(_perturbed_params(seed), "head."), "h": _uniform(rng, (3, GC_F2))}
    w = rng.standard_normal((3, GC_NWAY))
    return [Case(inputs, lambda p: ad.sum_(ad.mul(nn.head_forward(nn.head_view(p), p["h"]), Tensor(w))))]


def _backbone_case(seed: int) -> list[Case]:
    rng = np.random.default_rng(seed)
    inputs = _prefixed(_perturbed_params(seed), "backbone.")
    xs = [_uniform(rng, (3, d)) for d in GC_DIMS]
    c = [1] * len(GC_DIMS)
    ws = [rng.standard_normal((3, GC_F1)) for _ in GC_DIMS]

    def fn(p):
        Z = nn.backbone_forward(nn.backbone_view(p, len(GC_DIMS)), xs, c)
        return ad.sum_(ad.stack([ad.sum_(ad.mul(z, Tensor(w))) for z, w in zip(Z, ws)]))

    return [Case(inputs, fn)]


def _gc_task(seed: int, k_query: int = 2):
    spec = HTDSpec(GC_DIMS, ((1, 0, 0), (0, 1, 1), (1, 1, 1)), n_way=GC_NWAY, k_shot=1, k_query=k_query)
    rng = np.random.default_rng(seed)
    bank = make_class_bank(spec.M, GC_DIMS, 8, 1.0, rng)
    return sample_synthetic_task(spec, bank, rng, "train", 0.5, type_id=int(rng.integers(0, 3)))


def _forward_case(seed: int) -> list[Case]:
    params = _perturbed_params(seed)
    task = _gc_task(seed)
    arch = _gc_arch()

    def fn(p):
        model = MetaModel(arch, nn.ParamSet(dict(p), nn.init_params(arch, 0).tags), HETMAML)
        logits = model.logits(model.params.internal(), model.params.external(), task.support.xs, task.c)
        return ad.cross_entropy_loss(logits, task.support.y)

    # only parameters the task actually reaches; absent channels are checked elsewhere
    used = {k: v for k, v in params.items() if not k.startswith("backbone.") or task.c[int(k.split(".")[1])]}
    rest = {k: Tensor(v) for k, v in params.items() if k not in used}
    return [Case(used, lambda p: fn({**rest, **p}))]


CHECKS: dict[str, Callable[[int], list[Case]]] = {
    "primitives": _primitive_cases,
    "linear": _linear_case,
    "lstm": _lstm_case,
    "bilstm": _bilstm_case,
    "embed": _embed_case,
    "attention": _attention_case,
    "head": _head_case,
    "backbone": _backbone_case,
    "forward": _forward_case,
}


def meta_gradient_error(seed: int, inner_steps: int = 1, alpha: float = 0.1,
                        backends: Sequence[str] = BACKENDS) -> float:
    """Second-order meta-gradient (all parameters) against differences of the bilevel objective."""
    arch = _gc_arch()
    model = MetaModel(arch, nn.init_params(arch, seed).replace(_perturbed_params(seed)), HETMAML)
    task = _gc_task(seed, k_query=3)
    cfg = TrainConfig(alpha=alpha, inner_steps=inner_steps, second_order=True)
    values = model.params.arrays()
    numeric = central_difference(lambda v: bilevel_objective(model, task, cfg, v), values)
    worst = 0.0
    for backend in backends:
        if backend == "composite":
            with ad.composite_backward():
                grads, _, _ = task_meta_gradient(model, task, cfg)
        else:
            grads, _, _ = task_meta_gradient(model, task, cfg)
        for k in values:
            worst = max(worst, rel_error(grads[k], numeric[k]))
    return worst


ALL_CHECKS = tuple(CHECKS) + ("meta",)


def run_checks(only: Iterable[str] | None = None, seeds: int = 20, meta_seeds: int = 3,
               backends: Sequence[str] = BACKENDS) -> list[CheckResult]:
    names = list(ALL_CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise ValueError(f"unknown check(s) {unknown}; choose from {', '.join(ALL_CHECKS)}")
    results = []
    for name in names:
        if name == "meta":
            errs = [meta_gradient_error(s, backends=backends) for s in range(meta_seeds)]
            results.append(CheckResult(name, max(errs), META_TOL, len(errs)))
            continue
        worst, count = 0.0, 0
        for s in range(seeds):
            for case in CHECKS[name](s):
                worst = max(worst, case_error(case, backends))
                count += 1
        results.append(CheckResult(name, worst, LAYER_TOL, count))
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'check':<12}{'cases':>7}  {'max rel err':>12}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<12}{r.cases:>7}  {r.max_rel_err:>12.3e}  {r.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
