"""Heterogeneous task distributions: episodes, configuration vectors, data files.

Sample sets are stored modality-major: ``SampleSet.xs[m]`` is a
``[n_samples, D_m]`` float64 array and ``SampleSet.y`` holds the labels. Rows
are class-major (all shots of class 0, then class 1, ...). Absent modalities
are all-zero rows.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

HTFS_MAGIC = b"HTFS"
HTFS_VERSION = "htfs-1"
DEFAULT_EPSILON = 1e-1
DEFAULT_K_QUERY = 12


class DatasetError(ValueError):
    """A meta-dataset file or manifest failed validation."""


@dataclass(frozen=True)
class HTDSpec:
    """A mixture of task types, each a 0/1 mask over the M modalities."""

    modality_dims: tuple[int, ...]
    task_types: tuple[tuple[int, ...], ...]
    type_weights: tuple[float, ...] | None = None
    n_way: int = 5
    k_shot: int = 1
    k_query: int = DEFAULT_K_QUERY

    def __post_init__(self):
        dims = tuple(int(d) for d in self.modality_dims)
        types = tuple(tuple(int(bool(v)) for v in t) for t in self.task_types)
        object.__setattr__(self, "modality_dims", dims)
        object.__setattr__(self, "task_types", types)
        M = len(dims)
        if M < 1 or any(d <= 0 for d in dims):
            raise ValueError(f"modality dimensions must be positive, got {dims}")
        if not 2 <= len(types) <= 2**M - 1:
            raise ValueError(f"need 2 <= number of task types <= {2**M - 1}, got {len(types)}")
        for t in types:
            if len(t) != M or not any(t):
                raise ValueError(f"task type {t} must be a length-{M} mask with a present modality")
        if len(set(types)) != len(types):
            raise ValueError("task types must be distinct")
        w = self.type_weights
        w = tuple([1.0 / len(types)] * len(types)) if w is None else tuple(float(x) for x in w)
        if len(w) != len(types) or any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"type weights must be {len(types)} non-negative numbers summing to 1")
        object.__setattr__(self, "type_weights", w)
        if min(self.n_way, self.k_shot, self.k_query) < 1:
            raise ValueError("n_way, k_shot and k_query must be positive")

    @property
    def M(self) -> int:
        return len(self.modality_dims)


@dataclass
class LabeledSample:
    modalities: list[np.ndarray]
    label: int


@dataclass
class SampleSet:
    """Labeled samples of one task split (support or query), modality-major."""

    xs: list[np.ndarray]
    y: np.ndarray

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.y = np.asarray(self.y, dtype=np.int64)
        for x in self.xs:
            if x.ndim != 2 or x.shape[0] != self.y.shape[0]:
                raise ValueError(f"modality block {x.shape} does not match {self.y.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample([x[i] for x in self.xs], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "SampleSet":
        if not samples:
            raise ValueError("empty sample list")
        M = len(samples[0].modalities)
        xs = [np.stack([np.asarray(s.modalities[m], dtype=np.float64) for s in samples]) for m in range(M)]
        return cls(xs, np.array([s.label for s in samples]))

    def select(self, modalities: Sequence[int]) -> "SampleSet":
        return SampleSet([self.xs[m] for m in modalities], self.y)


@dataclass
class TaskInstance:
    support: SampleSet
    query: SampleSet
    c: tuple[int, ...]
    type_id: int

    @property
    def M(self) -> int:
        return len(self.support.xs)

    def select(self, modalities: Sequence[int], epsilon: float = DEFAULT_EPSILON) -> "TaskInstance":
        """The same episode restricted to a subset of modalities."""
        support = self.support.select(modalities)
        return TaskInstance(support, self.query.select(modalities), compute_config_vector(support, epsilon), self.type_id)


def _as_sample_set(support) -> SampleSet:
    if isinstance(support, SampleSet):
        return support
    return SampleSet.from_samples(list(support))


def modality_variances(support) -> np.ndarray:
    """Mean squared deviation from the support-set mean, per modality."""
    s = _as_sample_set(support)
    if len(s) == 0:
        raise ValueError("compute_config_vector: empty support set")
    out = np.empty(len(s.xs))
    for m, x in enumerate(s.xs):
        dev = x - x.mean(axis=0)
        out[m] = np.sum(dev * dev) / x.shape[0]
    return out


def compute_config_vector(support, epsilon: float = DEFAULT_EPSILON) -> tuple[int, ...]:
    """c^(m) = 0 iff modality m's support variance is strictly below ``epsilon``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return tuple(int(not v < epsilon) for v in modality_variances(support))


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass
class ClassBank:
    """Per-class, per-modality prototype vectors with a disjoint train/test split."""

    prototypes: list[list[np.ndarray]]  # [class][modality] -> [D_m]
    train_classes: list[int]
    test_classes: list[int]

    @property
    def n_classes(self) -> int:
        return len(self.prototypes)

    def classes(self, split: str) -> list[int]:
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ValueError(f"unknown split {split!r}")


def split_sizes(n_classes: int) -> tuple[int, int]:
    n_train = int(3 * n_classes / 4)
    return n_train, n_classes - n_train


def make_class_bank(
    M: int,
    dims: Sequence[int],
    n_classes: int,
    separation: float,
    rng: np.random.Generator,
    shared_latent: bool = False,
    latent_dim: int = 8,
) -> ClassBank:
    """Draw class prototypes from N(0, separation^2 I) per modality.

    With ``shared_latent`` every modality is a fixed random linear image of one
    latent class vector, so modalities carry the same class semantics.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    if len(dims) != M:
        raise ValueError(f"expected {M} modality dimensions, got {len(dims)}")
    if shared_latent:
        maps = [rng.standard_normal((d, latent_dim)) / np.sqrt(latent_dim) for d in dims]
        latents = rng.standard_normal((n_classes, latent_dim)) * separation
        protos = [[A @ latents[k] for A in maps] for k in range(n_classes)]
    else:
        protos = [[rng.standard_normal(d) * separation for d in dims] for _ in range(n_classes)]
    order = rng.permutation(n_classes)
    n_train, _ = split_sizes(n_classes)
    return ClassBank(protos, sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist()))


def sample_synthetic_task(
    spec: HTDSpec,
    bank: ClassBank,
    rng: np.random.Generator,
    split: str = "train",
    noise: float = 1.0,
    type_id: int | None = None,
    epsilon: float = DEFAULT_EPSILON,
) -> TaskInstance:
    """One N-way K-shot episode: prototype + Gaussian noise, absent modalities zeroed."""
    pool = bank.classes(split)
    if len(pool) < spec.n_way:
        raise ValueError(f"class bank split {split!r} has {len(pool)} classes, need {spec.n_way}")
    if type_id is None:
        type_id = int(rng.choice(len(spec.task_types), p=spec.type_weights))
    mask = spec.task_types[type_id]
    classes = rng.choice(pool, size=spec.n_way, replace=False)

    def draw(per_class: int) -> SampleSet:
        xs = []
        for m, d in enumerate(spec.modality_dims):
            block = np.empty((spec.n_way * per_class, d))
            for n, k in enumerate(classes):
                rows = bank.prototypes[k][m] + noise * rng.standard_normal((per_class, d))
                block[n * per_class : (n + 1) * per_class] = rows
            if not mask[m]:
                block[:] = 0.0
            xs.append(block)
        return SampleSet(xs, np.repeat(np.arange(spec.n_way), per_class))

    support = draw(spec.k_shot)
    query = draw(spec.k_query)
    c = compute_config_vector(support, epsilon)
    if c != mask:
        raise ValueError(f"sampled task has config vector {c} but type mask {mask}")
    return TaskInstance(support, query, c, type_id)


# ---------------------------------------------------------------------------
# HTFS v1 files


def _write_block(buf: list, s: SampleSet) -> None:
    for x in s.xs:
        buf.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    buf.append(np.ascontiguousarray(s.y, dtype="<u4").tobytes())


def encode_task(task: TaskInstance, n_way: int, k_shot: int, k_query: int) -> bytes:
    M = task.M
    dims = [x.shape[1] for x in task.support.xs]
    if len(task.support) != n_way * k_shot or len(task.query) != n_way * k_query:
        raise DatasetError("task does not match the declared episode shape")
    buf = [HTFS_MAGIC, struct.pack("<4I", M, n_way, k_shot, k_query), struct.pack(f"<{M}I", *dims)]
    _write_block(buf, task.support)
    _write_block(buf, task.query)
    return b"".join(buf)


def _expected_size(M: int, N: int, K: int, KQ: int, dims: Sequence[int]) -> int:
    return 4 + 16 + 4 * M + 4 * (N * K * (sum(dims) + 1)) + 4 * (N * KQ * (sum(dims) + 1))


def decode_task(raw: bytes, name: str = "<bytes>") -> tuple[SampleSet, SampleSet, tuple[int, ...], tuple[int, int, int]]:
    """Parse one HTFS task file into (support, query, dims, (N, K, KQ))."""
    if raw[:4] != HTFS_MAGIC:
        raise DatasetError(f"{name}: bad magic {raw[:4]!r}, expected {HTFS_MAGIC!r}")
    if len(raw) < 20:
        raise DatasetError(f"{name}: truncated header ({len(raw)} bytes)")
    M, N, K, KQ = struct.unpack_from("<4I", raw, 4)
    if len(raw) < 20 + 4 * M:
        raise DatasetError(f"{name}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack_from(f"<{M}I", raw, 20)
    expected = _expected_size(M, N, K, KQ, dims)
    if len(raw) != expected:
        raise DatasetError(f"{name}: file has {len(raw)} bytes, expected {expected}")
    off = 20 + 4 * M

    def read_block(n: int):
        nonlocal off
        xs = []
        for d in dims:
            cnt = n * d
            xs.append(np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).astype(np.float64).reshape(n, d))
            off += 4 * cnt
        y = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
        off += 4 * n
        if n and y.max() >= N:
            raise DatasetError(f"{name}: label {int(y.max())} out of range for {N}-way task")
        return SampleSet(xs, y)

    support = read_block(N * K)
    query = read_block(N * KQ)
    return support, query, tuple(dims), (N, K, KQ)


def save_meta_dataset(
    manifest_path: str | Path,
    spec: HTDSpec,
    tasks: Sequence[TaskInstance],
    task_dir: str = "tasks",
    prefix: str = "task",
    epsilon: float = DEFAULT_EPSILON,
) -> Path:
    """Write a manifest plus one HTFS file per task (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    (root / task_dir).mkdir(parents=True, exist_ok=True)
    entries = []
    width = max(5, len(str(len(tasks))))
    for i, task in enumerate(tasks):
        rel = f"{task_dir}/{prefix}_{i:0{width}d}.htfs"
        (root / rel).write_bytes(encode_task(task, spec.n_way, spec.k_shot, spec.k_query))
        entries.append({"file": rel, "type_id": int(task.type_id)})
    manifest = {
        "version": HTFS_VERSION,
        "M": spec.M,
        "modality_dims": list(spec.modality_dims),
        "n_way": spec.n_way,
        "k_shot": spec.k_shot,
        "k_query": spec.k_query,
        "task_types": [list(t) for t in spec.task_types],
        "type_weights": list(spec.type_weights),
        "epsilon": epsilon,
        "tasks": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest_path


def load_meta_dataset(manifest_path: str | Path) -> tuple[HTDSpec, list[TaskInstance]]:
    """Read a manifest and its task files, re-deriving and checking every c."""
    manifest_path = Path(manifest_path)
    try:
        man = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"{manifest_path}: cannot read manifest: {e}") from None
    if man.get("version") != HTFS_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported version {man.get('version')!r}")
    try:
        spec = HTDSpec(
            modality_dims=man["modality_dims"],
            task_types=man["task_types"],
            type_weights=man.get("type_weights"),
            n_way=man["n_way"],
            k_shot=man["k_shot"],
            k_query=man["k_query"],
        )
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(f"{manifest_path}: invalid manifest: {e}") from None
    if man.get("M") != spec.M:
        raise DatasetError(f"{manifest_path}: M={man.get('M')} disagrees with modality_dims")
    eps = float(man.get("epsilon", DEFAULT_EPSILON))
    tasks = []
    for entry in man["tasks"]:
        path = manifest_path.parent / entry["file"]
        type_id = int(entry["type_id"])
        if not 0 <= type_id < len(spec.task_types):
            raise DatasetError(f"{path.name}: type_id {type_id} out of range")
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise DatasetError(f"{path}: {e}") from None
        support, query, dims, shape = decode_task(raw, path.name)
        if dims != spec.modality_dims or shape != (spec.n_way, spec.k_shot, spec.k_query):
            raise DatasetError(f"{path.name}: header {dims} {shape} disagrees with the manifest")
        c = compute_config_vector(support, eps)
        if c != spec.task_types[type_id]:
            raise DatasetError(
                f"{path.name}: computed config vector {c} disagrees with declared type mask {spec.task_types[type_id]}"
            )
        tasks.append(TaskInstance(support, query, c, type_id))
    return spec, tasks


# ---------------------------------------------------------------------------
# Task sources for training


class SyntheticSource:
    """Infinite task stream from a class bank; ``source(rng)`` draws one episode."""

    def __init__(self, spec: HTDSpec, bank: ClassBank, split: str = "train", noise: float = 1.0,
                 type_id: int | None = None, epsilon: float = DEFAULT_EPSILON):
        self.spec = spec
        self.bank = bank
        self.split = split
        self.noise = noise
        self.type_id = type_id
        self.epsilon = epsilon

    def __call__(self, rng: np.random.Generator) -> TaskInstance:
        return sample_synthetic_task(self.spec, self.bank, rng, self.split, self.noise, self.type_id, self.epsilon)


class DatasetSource:
    """Draw tasks from a fixed list: type by ``type_weights``, then uniformly within it."""

    def __init__(self, spec: HTDSpec, tasks: Sequence[TaskInstance], type_id: int | None = None):
        self.spec = spec
        self.by_type: dict[int, list[TaskInstance]] = {}
        for t in tasks:
            self.by_type.setdefault(t.type_id, []).append(t)
        self.type_id = type_id
        if type_id is not None and type_id not in self.by_type:
            raise ValueError(f"no tasks of type {type_id}")
        if not self.by_type:
            raise ValueError("empty task list")

    def __call__(self, rng: np.random.Generator) -> TaskInstance:
        if self.type_id is not None:
            r = self.type_id
        else:
            types = sorted(self.by_type)
            w = np.array([self.spec.type_weights[r] for r in types])
            r = types[int(rng.choice(len(types), p=w / w.sum()))]
        pool = self.by_type[r]
        return pool[int(rng.integers(len(pool)))]


TaskSource = Callable[[np.random.Generator], TaskInstance]
