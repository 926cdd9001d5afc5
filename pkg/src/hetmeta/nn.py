"""Network blocks: multi-channel backbone, task-aware aggregation (TFAN), head.

Every function is batch-first: a set of ``B`` samples is a ``[B, D]`` tensor.
1-D inputs are accepted and treated as a batch of one.

Parameters live in a flat :class:`ParamSet` (name -> Tensor, tagged internal or
external). :func:`unflatten` builds the structured views the layer functions
consume, so the same layer code runs on meta-initial, adapted, or
tape-tracked parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INTERNAL = "internal"
EXTERNAL = "external"

LSTM_GATES = ("f", "i", "o", "c")
LSTM_FIELDS = tuple(f"{k}_{g}" for k in ("W", "U", "b") for g in LSTM_GATES)


@dataclass(frozen=True)
class Architecture:
    """Dimensions of a HetMAML network.

    ``modality_dims`` are the raw input sizes D_m; ``f1`` is the shared
    embedding width, ``f2`` the BiLSTM state width (both directions), ``f3`` the
    task-embedding width.
    """

    modality_dims: tuple[int, ...]
    f1: int
    f2: int
    f3: int
    n_way: int

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        dims = (*self.modality_dims, self.f1, self.f2, self.f3, self.n_way)
        if not self.modality_dims or any(d <= 0 for d in dims):
            raise ValueError(f"architecture dimensions must be positive: {self}")
        if self.f2 % 2:
            raise ValueError(f"F2 must be even (per-direction hidden size F2/2), got {self.f2}")

    @property
    def M(self) -> int:
        return len(self.modality_dims)

    @property
    def hidden(self) -> int:
        return self.f2 // 2


@dataclass
class LinearParams:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]


@dataclass
class LSTMCellParams:
    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_c: Tensor
    U_f: Tensor
    U_i: Tensor
    U_o: Tensor
    U_c: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_c: Tensor


@dataclass
class TfanParams:
    fwd: LSTMCellParams
    bwd: LSTMCellParams
    task_embed: list[LinearParams]
    attn_v: Tensor  # [F3]
    attn_W: Tensor  # [F3, F2 + F3]


@dataclass
class BackboneParams:
    channels: list[list[LinearParams]]


@dataclass
class HeadParams:
    layers: list[LinearParams]


class ParamSet:
    """Named tensors partitioned into internal (adapted) and external (frozen) groups."""

    def __init__(self, tensors: Mapping[str, Tensor], tags: Mapping[str, str]):
        if set(tensors) != set(tags):
            raise ValueError("every tensor needs exactly one tag")
        bad = {t for t in tags.values()} - {INTERNAL, EXTERNAL}
        if bad:
            raise ValueError(f"unknown tags {bad}")
        self.tensors = dict(tensors)
        self.tags = dict(tags)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self, tag: str | None = None) -> list[str]:
        return [n for n in self.tensors if tag is None or self.tags[n] == tag]

    def internal(self) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in self.names(INTERNAL)}

    def external(self) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in self.names(EXTERNAL)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def replace(self, values: Mapping[str, np.ndarray | Tensor]) -> "ParamSet":
        new = dict(self.tensors)
        for n, v in values.items():
            if n not in new:
                raise KeyError(n)
            v = v if isinstance(v, Tensor) else Tensor(v)
            if v.shape != new[n].shape:
                raise ShapeError(f"{n}: shape {v.shape} != {new[n].shape}")
            new[n] = v
        return ParamSet(new, self.tags)

    def copy(self) -> "ParamSet":
        return ParamSet({n: Tensor(t.data.copy()) for n, t in self.tensors.items()}, self.tags)

    def count(self, tag: str | None = None) -> int:
        return sum(self.tensors[n].size for n in self.names(tag))

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, tags and values (insertion order ignored)."""
        if set(self.tensors) != set(other.tensors) or self.tags != other.tags:
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].data.tobytes() == other.tensors[n].data.tobytes()
            for n in self.tensors
        )


# ---------------------------------------------------------------------------
# Shape plumbing


def _as_batch(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    if x.ndim != 2:
        raise ShapeError(f"expected a vector or a [batch, features] matrix, got {x.shape}")
    return x, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return ad.reshape(x, (x.shape[1],)) if single else x


def linear(p: LinearParams, x: Tensor) -> Tensor:
    out_dim, in_dim = p.weight.shape
    if x.shape[-1] != in_dim or p.bias.shape != (out_dim,):
        raise ShapeError(
            f"linear: input {x.shape} / bias {p.bias.shape} incompatible with weight {p.weight.shape}"
        )
    return ad.linear(x, p.weight, p.bias)


def mlp(layers: Sequence[LinearParams], x: Tensor) -> Tensor:
    """tanh on hidden layers, linear output."""
    for k, layer in enumerate(layers):
        x = linear(layer, x)
        if k < len(layers) - 1:
            x = ad.tanh(x)
    return x


# ---------------------------------------------------------------------------
# Multi-channel backbone


def backbone_forward(params: BackboneParams, sample: Sequence, c: Sequence) -> list[Tensor]:
    """Encode each modality with its own channel; absent modalities give exact zeros.

    ``sample[m]`` is ``[D_m]`` or ``[B, D_m]``. A channel with ``c[m] == 0`` is
    never evaluated, so its parameters receive no tape entries.
    """
    M = len(params.channels)
    if len(sample) != M or len(c) != M:
        raise ShapeError(f"backbone: expected {M} modalities and config entries, got {len(sample)}/{len(c)}")
    out = []
    for m, (layers, x) in enumerate(zip(params.channels, sample)):
        x, single = _as_batch(x)
        d_in = layers[0].weight.shape[1]
        if x.shape[1] != d_in:
            raise ShapeError(f"backbone: modality {m} has dimension {x.shape[1]}, channel expects {d_in}")
        if c[m]:
            z = mlp(layers, x)
        else:
            z = Tensor(np.zeros((x.shape[0], layers[-1].weight.shape[0])))
        out.append(_unbatch(z, single))
    return out


# ---------------------------------------------------------------------------
# LSTM / BiLSTM


def _pack(p: LSTMCellParams) -> tuple[Tensor, Tensor, Tensor]:
    """Stack gate blocks (order f, i, o, c) into [4H, F1], [4H, H] and [4H]."""
    W = ad.concat([p.W_f, p.W_i, p.W_o, p.W_c], axis=0)
    U = ad.concat([p.U_f, p.U_i, p.U_o, p.U_c], axis=0)
    b = ad.concat([p.b_f, p.b_i, p.b_o, p.b_c], axis=0)
    return W, U, b


def _step(packed, z: Tensor, h_prev: Tensor | None, c_prev: Tensor | None):
    W, U, b = packed
    H = U.shape[1]
    pre = ad.linear(z, W, b)
    if h_prev is not None:
        pre = ad.add(pre, ad.linear(h_prev, U))
    gates = ad.sigmoid(pre[:, 0 : 3 * H])
    f = gates[:, 0:H]
    i = gates[:, H : 2 * H]
    o = gates[:, 2 * H : 3 * H]
    g = ad.tanh(pre[:, 3 * H : 4 * H])
    cell = ad.mul(i, g)
    if c_prev is not None:
        cell = ad.add(ad.mul(f, c_prev), cell)
    return ad.mul(o, ad.tanh(cell)), cell


def _check_lstm(p: LSTMCellParams, f1: int) -> int:
    H = p.U_f.shape[0]
    for name in LSTM_FIELDS:
        t = getattr(p, name)
        want = {"W": (H, f1), "U": (H, H), "b": (H,)}[name[0]]
        if t.shape != want:
            raise ShapeError(f"lstm: parameter {name} has shape {t.shape}, expected {want}")
    return H


def lstm_cell(params: LSTMCellParams, z, h_prev, cell_prev) -> tuple[Tensor, Tensor]:
    """One LSTM step: gates f, i, o, candidate c~, new memory cell, new hidden state."""
    z, single = _as_batch(z)
    h_prev, _ = _as_batch(h_prev)
    cell_prev, _ = _as_batch(cell_prev)
    H = _check_lstm(params, z.shape[1])
    if h_prev.shape != (z.shape[0], H) or cell_prev.shape != (z.shape[0], H):
        raise ShapeError(f"lstm: state shapes {h_prev.shape}/{cell_prev.shape} do not match H={H}")
    h, cell = _step(_pack(params), z, h_prev, cell_prev)
    return _unbatch(h, single), _unbatch(cell, single)


def iterative_aggregate(params: TfanParams, Z: Sequence) -> list[Tensor]:
    """BiLSTM over the modality sequence; h^(m) = forward state (+) backward state.

    Both directions start from zero hidden and cell states.
    """
    if len(Z) == 0:
        raise ShapeError("iterative_aggregate: empty modality sequence")
    batch = [_as_batch(z) for z in Z]
    single = batch[0][1]
    Z = [z for z, _ in batch]
    _check_lstm(params.fwd, Z[0].shape[1])
    _check_lstm(params.bwd, Z[0].shape[1])
    M = len(Z)
    fw = _pack(params.fwd)
    bw = _pack(params.bwd)
    h_f: list = [None] * M
    h_b: list = [None] * M
    h = c = None
    for m in range(M):
        h, c = _step(fw, Z[m], h, c)
        h_f[m] = h
    h = c = None
    for m in reversed(range(M)):
        h, c = _step(bw, Z[m], h, c)
        h_b[m] = h
    return [_unbatch(ad.concat([h_f[m], h_b[m]], axis=1), single) for m in range(M)]


# ---------------------------------------------------------------------------
# Task embedding and attention


def task_embed(params: TfanParams, c: Sequence) -> Tensor:
    """tau = g_phi(c): a tanh MLP on the 0/1 configuration vector."""
    c = np.asarray(c, dtype=np.float64).reshape(1, -1)
    if c.shape[1] != params.task_embed[0].weight.shape[1]:
        raise ShapeError(f"task_embed: config vector of length {c.shape[1]}, expected {params.task_embed[0].weight.shape[1]}")
    tau = mlp(params.task_embed, Tensor(c))
    return ad.reshape(tau, (tau.shape[1],))


def attention_aggregate(params: TfanParams, H: Sequence, tau: Tensor) -> tuple[Tensor, Tensor]:
    """Task-conditioned attention pooling over the M hidden states.

    score_m = v . tanh(W_h [h^(m) (+) tau]); A = softmax_m(score);
    h* = sum_m A_m h^(m). Returns ``(h_star, A)`` with ``A`` shaped ``[B, M]``
    (``[M]`` for unbatched input).
    """
    batch = [_as_batch(h) for h in H]
    single = batch[0][1]
    Hs = [h for h, _ in batch]
    M = len(Hs)
    if M == 0:
        raise ShapeError("attention: empty hidden-state sequence")
    B, F2 = Hs[0].shape
    F3 = params.attn_v.shape[0]
    if tau.shape != (F3,) or params.attn_W.shape != (F3, F2 + F3):
        raise ShapeError(
            f"attention: tau {tau.shape}, W_h {params.attn_W.shape} incompatible with F2={F2}, F3={F3}"
        )
    hcat = ad.concat(Hs, axis=0)  # [M*B, F2]
    taus = ad.broadcast_to(tau, (M * B, F3))
    pre = ad.tanh(ad.linear(ad.concat([hcat, taus], axis=1), params.attn_W))
    scores = ad.matmul(pre, ad.reshape(params.attn_v, (F3, 1)))  # [M*B, 1]
    scores = ad.transpose(ad.reshape(scores, (M, B)))  # [B, M]
    A = ad.softmax(scores)
    weights = ad.broadcast_to(ad.reshape(ad.transpose(A), (M, B, 1)), (M, B, F2))
    h_star = ad.sum_(ad.mul(weights, ad.stack(Hs, axis=0)), axis=0)
    if single:
        return ad.reshape(h_star, (F2,)), ad.reshape(A, (M,))
    return h_star, A


def head_forward(params: HeadParams, h_star) -> Tensor:
    """Classifier logits (softmax is applied inside the loss)."""
    x, single = _as_batch(h_star)
    return _unbatch(mlp(params.layers, x), single)


# ---------------------------------------------------------------------------
# Parameter naming, initialisation and counting


def _linear_shapes(prefix: str, dims: Sequence[int]) -> list[tuple[str, tuple]]:
    out = []
    for k in range(len(dims) - 1):
        out.append((f"{prefix}.{k}.weight", (dims[k + 1], dims[k])))
        out.append((f"{prefix}.{k}.bias", (dims[k + 1],)))
    return out


def param_shapes(arch: Architecture) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, tag) for every HetMAML parameter."""
    F1, F2, F3, H = arch.f1, arch.f2, arch.f3, arch.hidden
    spec: list[tuple[str, tuple, str]] = []
    for m, d in enumerate(arch.modality_dims):
        spec += [(n, s, EXTERNAL) for n, s in _linear_shapes(f"backbone.{m}", (d, F1, F1))]
    for direction in ("fwd", "bwd"):
        for name in LSTM_FIELDS:
            shape = {"W": (H, F1), "U": (H, H), "b": (H,)}[name[0]]
            spec.append((f"tfan.{direction}.{name}", shape, INTERNAL))
    spec += [(n, s, EXTERNAL) for n, s in _linear_shapes("tfan.embed", (arch.M, F3, F3))]
    spec.append(("tfan.attn_v", (F3,), EXTERNAL))
    spec.append(("tfan.attn_W", (F3, F2 + F3), EXTERNAL))
    spec += [(n, s, INTERNAL) for n, s in _linear_shapes("head", (F2, F2, arch.n_way))]
    return spec


def glorot_bound(shape: tuple) -> float:
    fan_out, fan_in = (shape[0], 1) if len(shape) == 1 else shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_from_shapes(spec: Sequence[tuple[str, tuple, str]], seed: int) -> ParamSet:
    """Uniform Glorot weights, zero biases, forget-gate biases set to one."""
    rng = np.random.default_rng(seed)
    tensors, tags = {}, {}
    for name, shape, tag in spec:
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b_f":
            arr = np.ones(shape)
        elif leaf == "bias" or leaf.startswith("b_"):
            arr = np.zeros(shape)
        else:
            lim = glorot_bound(shape)
            arr = rng.uniform(-lim, lim, size=shape)
        tensors[name] = Tensor(arr)
        tags[name] = tag
    return ParamSet(tensors, tags)


def init_params(arch: Architecture, seed: int) -> ParamSet:
    return init_from_shapes(param_shapes(arch), seed)


def _linears(p: Mapping[str, Tensor], prefix: str) -> list[LinearParams]:
    layers = []
    k = 0
    while f"{prefix}.{k}.weight" in p:
        layers.append(LinearParams(p[f"{prefix}.{k}.weight"], p[f"{prefix}.{k}.bias"]))
        k += 1
    return layers


def _lstm(p: Mapping[str, Tensor], prefix: str) -> LSTMCellParams:
    return LSTMCellParams(**{name: p[f"{prefix}.{name}"] for name in LSTM_FIELDS})


def backbone_view(p: Mapping[str, Tensor], M: int) -> BackboneParams:
    return BackboneParams([_linears(p, f"backbone.{m}") for m in range(M)])


def tfan_view(p: Mapping[str, Tensor], with_lstm: bool = True) -> TfanParams:
    """Structured TFAN view; ``with_lstm=False`` skips the (internal) BiLSTM."""
    return TfanParams(
        fwd=_lstm(p, "tfan.fwd") if with_lstm else None,
        bwd=_lstm(p, "tfan.bwd") if with_lstm else None,
        task_embed=_linears(p, "tfan.embed"),
        attn_v=p["tfan.attn_v"],
        attn_W=p["tfan.attn_W"],
    )


def head_view(p: Mapping[str, Tensor]) -> HeadParams:
    return HeadParams(_linears(p, "head"))


def unflatten(arch: Architecture, p: Mapping[str, Tensor]) -> tuple[BackboneParams, TfanParams, HeadParams]:
    return backbone_view(p, arch.M), tfan_view(p), head_view(p)


def _size(t: Tensor) -> int:
    return int(t.size)


def lstm_param_count(p: LSTMCellParams) -> int:
    return sum(_size(getattr(p, n)) for n in LSTM_FIELDS)


def aggregator_param_count(p: TfanParams) -> int:
    """BiLSTM plus attention parameters: the part of TFAN whose size ignores M."""
    return lstm_param_count(p.fwd) + lstm_param_count(p.bwd) + _size(p.attn_v) + _size(p.attn_W)


def tfan_param_count(p: TfanParams) -> int:
    return aggregator_param_count(p) + sum(_size(l.weight) + _size(l.bias) for l in p.task_embed)


def tfan_param_formula(M: int, f1: int, f2: int, f3: int) -> int:
    """Closed form 2*4*(F1*H + H^2 + H) + |phi| + F3 + F3*(F2+F3), H = F2/2."""
    H = f2 // 2
    phi = (M * f3 + f3) + (f3 * f3 + f3)
    return 2 * 4 * (f1 * H + H * H + H) + phi + f3 + f3 * (f2 + f3)
