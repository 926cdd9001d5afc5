"""``hetmeta`` command line: gen-data, train, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from ..hetmaml import (
    HETMAML,
    MAML,
    MULTI_MAML_BF,
    AdaptationTrace,
    MetaModel,
    MultiMAMLBF,
    evaluate,
    evaluate_bf,
    meta_train,
    multi_maml_bf_train,
    split_budget,
)
from ..nn import Architecture, ParamSet
from ..tasks import (
    DatasetError,
    DatasetSource,
    HTDSpec,
    SyntheticSource,
    load_meta_dataset,
    make_class_bank,
    sample_synthetic_task,
    save_meta_dataset,
    split_sizes,
)
from . import gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, format_types, load_config_file, parse_types, resolve

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_CHECK = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.hmck"
METRICS_NAME = "metrics.csv"
CURVE_NAME = "adaptation_curve.csv"

log = logging.getLogger("hetmeta")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=_u64, help="random seed")
    common.add_argument("--out", metavar="DIR", help="output directory")

    p = _Parser(prog="hetmeta", description="Heterogeneous-task meta-learning toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic HTFS meta-dataset")
    g.add_argument("--classes", type=int, default=40)
    g.add_argument("--modalities", type=int, default=2)
    g.add_argument("--dims", type=_int_list, help="modality dimensions (default 16,12,8,...)")
    g.add_argument("--types", default=None, help='task types, e.g. "X1,X2,X1+X2" (default: every combination)')
    g.add_argument("--n-way", type=int, default=5)
    g.add_argument("--k-shot", type=int, default=1)
    g.add_argument("--k-query", type=int, default=12)
    g.add_argument("--tasks", type=int, default=200, help="meta-train tasks")
    g.add_argument("--test-tasks", type=int, help="meta-test tasks (default tasks // 4)")
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--noise", type=float, default=1.0)
    g.add_argument("--shared-latent", action="store_true")

    t = sub.add_parser("train", parents=[common], help="meta-train a model")
    t.add_argument("--model", choices=[HETMAML, MAML, MULTI_MAML_BF])
    t.add_argument("--iterations", type=int)
    t.add_argument("--inner-steps", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--meta-batch", type=int)
    t.add_argument("--first-order", action="store_true", default=None)
    t.add_argument("--workers", type=int)
    t.add_argument("--dataset", metavar="MANIFEST", help="meta-train HTFS manifest (replaces synthetic tasks)")

    e = sub.add_parser("eval", parents=[common], help="adaptation curve on meta-test tasks")
    e.add_argument("--checkpoint", metavar="PATH", help=f"default: <out>/{CHECKPOINT_NAME}")
    e.add_argument("--dataset", metavar="MANIFEST", help="meta-test HTFS manifest")
    e.add_argument("--inner-steps", type=int)
    e.add_argument("--alpha", type=float)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--only", action="append", metavar="CHECK",
                   help=f"run only these checks ({', '.join(gradcheck.ALL_CHECKS)}); repeatable or comma-separated")
    c.add_argument("--seeds", type=int, default=20)
    return p


# ---------------------------------------------------------------------------
# Helpers


def _load_cfg(args, flags: dict) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else None
    flags = dict(flags, seed=args.seed, out=args.out)
    return resolve(file_values, flags)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _synthetic_bank(cfg: ExperimentConfig):
    syn = cfg.synthetic
    rng = np.random.default_rng(syn.data_seed)
    return make_class_bank(len(cfg.modality_dims), cfg.modality_dims, syn.classes, syn.separation, rng,
                           shared_latent=syn.shared_latent)


def _train_source(cfg: ExperimentConfig, spec: HTDSpec, type_id=None):
    if cfg.dataset is not None:
        dspec, tasks = load_meta_dataset(cfg.dataset)
        if dspec.modality_dims != spec.modality_dims or dspec.task_types != spec.task_types:
            raise DatasetError(
                f"{cfg.dataset}: dataset has dims {dspec.modality_dims} and types {format_types(dspec.task_types)}, "
                f"config expects {spec.modality_dims} and {format_types(spec.task_types)}"
            )
        return DatasetSource(dspec, tasks, type_id)
    return SyntheticSource(spec, _synthetic_bank(cfg), "train", cfg.synthetic.noise, type_id, cfg.epsilon)


def _spec_from_dataset(cfg: ExperimentConfig) -> ExperimentConfig:
    """Adopt modality dims, task types and episode shape from the training dataset."""
    if cfg.dataset is None:
        return cfg
    dspec, _ = load_meta_dataset(cfg.dataset)
    cfg.modality_dims = dspec.modality_dims
    cfg.task_types = dspec.task_types
    cfg.type_weights = dspec.type_weights
    cfg.n_way, cfg.k_shot, cfg.k_query = dspec.n_way, dspec.k_shot, dspec.k_query
    return cfg.validate()


def _meta(cfg: ExperimentConfig) -> dict:
    return {
        "model": cfg.model,
        "modality_dims": list(cfg.modality_dims),
        "task_types": [list(t) for t in cfg.task_types],
        "n_way": cfg.n_way,
        "f1": cfg.f1,
        "f2": cfg.f2,
        "f3": cfg.f3,
    }


def _bf_params(bf: MultiMAMLBF) -> ParamSet:
    return bf.named_params()


def _restore(params: ParamSet, meta: dict):
    """Rebuild a MetaModel or MultiMAMLBF from checkpoint contents."""
    try:
        kind = meta["model"]
        dims = tuple(meta["modality_dims"])
        arch = Architecture(dims, meta["f1"], meta["f2"], meta["f3"], meta["n_way"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint metadata incomplete: {e}") from None
    if kind in (HETMAML, MAML):
        ref = MetaModel.create(arch, 0, kind)
        _check_names(ref.params, params)
        return MetaModel(arch, params, kind)
    if kind == MULTI_MAML_BF:
        spec = HTDSpec(dims, tuple(tuple(t) for t in meta["task_types"]), n_way=meta["n_way"])
        bf = MultiMAMLBF.create(spec, arch.f1, arch.f2, arch.f3, 0)
        _check_names(bf.named_params(), params)
        for r, model in bf.models.items():
            prefix = f"type{r}/"
            model.params = ParamSet(
                {n[len(prefix):]: t for n, t in params.tensors.items() if n.startswith(prefix)},
                {n[len(prefix):]: g for n, g in params.tags.items() if n.startswith(prefix)},
            )
        return bf
    raise CheckpointError(f"unknown model kind {kind!r} in checkpoint")


def _check_names(ref: ParamSet, got: ParamSet) -> None:
    want = {n: (ref[n].shape, ref.tags[n]) for n in ref}
    have = {n: (got[n].shape, got.tags[n]) for n in got}
    if want != have:
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        wrong = sorted(n for n in set(want) & set(have) if want[n] != have[n])
        raise CheckpointError(f"checkpoint does not match its architecture (missing {missing[:3]}, "
                              f"unexpected {extra[:3]}, mismatched {wrong[:3]})")


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    if args.config:
        raise UsageError("gen-data takes its parameters from flags only")
    M = args.modalities
    dims = args.dims or [max(2, 16 - 4 * m) for m in range(M)]
    if len(dims) != M:
        raise ConfigError(f"--dims lists {len(dims)} dimensions for {M} modalities")
    if args.types:
        types = parse_types(args.types, M)
    else:
        types = tuple(tuple((k >> m) & 1 for m in range(M)) for k in range(1, 2**M))
    spec = HTDSpec(tuple(dims), types, None, args.n_way, args.k_shot, args.k_query)
    if args.tasks < 1:
        raise ConfigError("--tasks must be >= 1")
    if args.classes < 2:
        raise ConfigError("--classes must be >= 2")
    n_test = args.tasks // 4 if args.test_tasks is None else args.test_tasks
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out or "data")
    rng = np.random.default_rng(seed)
    bank = make_class_bank(M, dims, args.classes, args.separation, rng, shared_latent=args.shared_latent)
    n_train, n_testc = split_sizes(args.classes)
    for split, n in (("train", n_train), ("test", n_testc)):
        if n < spec.n_way:
            raise ConfigError(f"{split} split has {n} classes but --n-way is {spec.n_way}")
    train = [sample_synthetic_task(spec, bank, rng, "train", args.noise) for _ in range(args.tasks)]
    test = [sample_synthetic_task(spec, bank, rng, "test", args.noise) for _ in range(n_test)]
    try:
        save_meta_dataset(out / "meta_train" / "manifest.json", spec, train)
        if test:
            save_meta_dataset(out / "meta_test" / "manifest.json", spec, test)
    except OSError as e:
        raise ConfigError(f"cannot write dataset under {out}: {e.strerror}") from None
    print(f"classes: {n_train}/{n_testc} (meta-train/meta-test)")
    print(f"task types: {format_types(types)}")
    print(f"wrote {len(train)} meta-train tasks to {out / 'meta_train'}")
    if test:
        print(f"wrote {len(test)} meta-test tasks to {out / 'meta_test'}")
    return EXIT_OK


def _train_rows(cfg: ExperimentConfig, logs) -> tuple[list[str], list[list]]:
    n_types = len(cfg.task_types)
    header = ["iteration", "mean_query_loss", "mean_query_acc"] + [f"acc_type_{k}" for k in range(n_types)]
    rows = []
    for row in logs:
        rows.append([row["iteration"], row["mean_query_loss"], row["mean_query_acc"]]
                    + [row[f"acc_type_{k}"] for k in range(n_types)])
    return header, rows


def cmd_train(args) -> int:
    flags = {
        "model": args.model,
        "iterations": args.iterations,
        "inner_steps": args.inner_steps,
        "alpha": args.alpha,
        "beta": args.beta,
        "meta_batch": args.meta_batch,
        "workers": args.workers,
        "second_order": False if args.first_order else None,
        "dataset": args.dataset,
    }
    cfg = _spec_from_dataset(_load_cfg(args, flags))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.spec()
    tcfg = cfg.train_config()
    log.info("training %s for %d iterations (seed %d)", cfg.model, cfg.iterations, cfg.seed)

    def progress(it, m):
        if it % 100 == 0 or it == cfg.iterations:
            log.info("iteration %d: loss %.4f acc %.3f", it, m.loss, m.acc)

    if cfg.model == MULTI_MAML_BF:
        streams = {r: _train_source(cfg, spec, r) for r in range(len(spec.task_types))}
        budget = split_budget(cfg.iterations, spec.type_weights)
        bf, logs = multi_maml_bf_train(spec, streams, tcfg, cfg.f1, cfg.f2, cfg.f3,
                                       callback=lambda r, it, m: progress(it, m), iterations=budget)
        rows = []
        for r in range(len(spec.task_types)):
            rows.extend(logs[r].rows)
        for i, row in enumerate(rows):
            row["iteration"] = i + 1
        params = _bf_params(bf)
    else:
        model = MetaModel.create(cfg.arch(), cfg.seed, cfg.model)
        model, tlog = meta_train(model, _train_source(cfg, spec), tcfg, len(spec.task_types), progress)
        rows = tlog.rows
        params = model.params
    header, table = _train_rows(cfg, rows)
    _write_csv(out / METRICS_NAME, header, table)
    save_checkpoint(out / CHECKPOINT_NAME, params, _meta(cfg))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / CHECKPOINT_NAME} and {out / METRICS_NAME}")
    return EXIT_OK


def curve_rows(trace: AdaptationTrace, n_types: int) -> tuple[list[str], list[list]]:
    header = ["step", "overall_acc"] + [f"acc_type_{k}" for k in range(n_types)]
    per_type = trace.type_acc()
    rows = []
    for step in range(trace.steps + 1):
        row = [step, float(trace.mean_acc()[step])]
        row += [float(per_type[k][step]) if k in per_type else float("nan") for k in range(n_types)]
        rows.append(row)
    return header, rows


def cmd_eval(args) -> int:
    cfg = _load_cfg(args, {"inner_steps": args.inner_steps, "alpha": args.alpha})
    out = Path(cfg.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    params, meta = load_checkpoint(ckpt)
    model = _restore(params, meta)
    dims = tuple(meta["modality_dims"])
    types = tuple(tuple(t) for t in meta["task_types"])
    if args.dataset or cfg.test_dataset:
        spec, tasks = load_meta_dataset(args.dataset or cfg.test_dataset)
    elif cfg.synthetic is not None:
        cfg.modality_dims, cfg.task_types = dims, types
        cfg.n_way = meta["n_way"]
        cfg.validate()
        spec = cfg.spec()
        rng = np.random.default_rng([cfg.synthetic.data_seed, 1])
        source = SyntheticSource(spec, _synthetic_bank(cfg), "test", cfg.synthetic.noise, None, cfg.epsilon)
        tasks = [source(rng) for _ in range(cfg.synthetic.test_tasks)]
    else:
        raise ConfigError("eval needs --dataset (a meta-test manifest) or synthetic parameters")
    if spec.modality_dims != dims or spec.n_way != meta["n_way"]:
        raise ConfigError(
            f"checkpoint expects modality dims {dims} and {meta['n_way']}-way tasks; "
            f"dataset has {spec.modality_dims} and {spec.n_way}-way"
        )
    if meta["model"] == MULTI_MAML_BF and spec.task_types != types:
        raise ConfigError("dataset task types differ from the ones the Multi-MAML(BF) checkpoint was trained on")
    tcfg = cfg.train_config()
    trace = evaluate_bf(model, tasks, tcfg) if meta["model"] == MULTI_MAML_BF else evaluate(model, tasks, tcfg)
    header, rows = curve_rows(trace, len(spec.task_types))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / CURVE_NAME, header, rows)
    print(f"step 0 acc {rows[0][1]:.4f}, step {trace.steps} acc {rows[-1][1]:.4f} on {len(tasks)} tasks")
    print(f"wrote {out / CURVE_NAME}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    only = None
    if args.only:
        only = [n.strip() for part in args.only for n in part.split(",") if n.strip()]
        bad = [n for n in only if n not in gradcheck.ALL_CHECKS]
        if bad:
            raise UsageError(f"unknown check(s) {bad}; choose from {', '.join(gradcheck.ALL_CHECKS)}")
    results = gradcheck.run_checks(only, seeds=args.seeds)
    print(gradcheck.format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_CHECK
    print("all checks passed")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _setup_logging() -> None:
    level = os.environ.get("HETMETA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"HETMETA_LOG must be one of error, info, debug; got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DatasetError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
