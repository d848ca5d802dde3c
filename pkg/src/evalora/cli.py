"""Command-line front end: ``evalora <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as fio
from . import plots
from .adapter import KINDS, InitMode, merge_network
from .alloc import allocation_delta
from .net import NumericalError, TaskConfig, forward_with_taps, make_teacher_student
from .pipeline import (INIT_STREAM_OFFSET, activation_hosts, allocation_matrix, initialize,
                       initialize_from_activations, rho_sweep)
from .svdstream import StreamConfig
from .train import TrainConfig, compare_inits, default_workers, finetune

log = logging.getLogger("evalora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _modes(text: str) -> list[str]:
    modes = [t.strip() for t in text.split(",") if t.strip()]
    bad = [m for m in modes if m not in KINDS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown modes {bad}; choose from {', '.join(KINDS)}")
    return modes


def _parents() -> list[argparse.ArgumentParser]:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="experiment config file (key = value lines)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory (default: current directory)")
    g.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")

    task = argparse.ArgumentParser(add_help=False)
    t = task.add_argument_group("synthetic teacher-student task")
    d = TaskConfig()
    t.add_argument("--width", type=int, default=d.width, help=f"hidden width (default {d.width})")
    t.add_argument("--depth", type=int, default=d.depth, help=f"dense blocks (default {d.depth})")
    t.add_argument("--z-dim", type=int, default=d.z_dim, help=f"latent input rank (default {d.z_dim})")
    t.add_argument("--no-attention", action="store_true", help="drop the attention block")
    t.add_argument("--perturbation", type=float, default=d.perturbation,
                   help=f"student weight noise scale (default {d.perturbation})")
    t.add_argument("--target-noise", type=float, default=d.target_noise,
                   help=f"label noise std (default {d.target_noise})")
    stream = argparse.ArgumentParser(add_help=False)
    g = stream.add_argument_group("initialisation pass")
    g.add_argument("--rank", type=int, help="override config rank")
    g.add_argument("--rho", type=float, help="override config rho")
    g.add_argument("--mode", choices=KINDS, help="override config init mode")
    g.add_argument("--init-rows", type=int, default=16, help="rows per SVD minibatch (default 16)")
    g.add_argument("--max-batches", type=int, default=500, help="cap on SVD minibatches (default 500)")
    return [common, task, stream]


def build_parser() -> argparse.ArgumentParser:
    parents = _parents()
    parser = _Parser(prog="evalora", description="Explained-variance adapter initialisation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("collect", parents=parents, help="dump layer activations of the synthetic student")
    p.add_argument("--batches", type=int, default=8, help="number of minibatches (default 8)")
    p.add_argument("--rows", type=int, default=16, help="rows per minibatch (default 16)")
    p.add_argument("--name", default="activations.evad", help="output file name inside --out")

    p = sub.add_parser("init", parents=parents, help="run the SVD pass and write an adapter checkpoint")
    p.add_argument("--data", default="synthetic",
                   help="'synthetic', an activation dump (.evad) or a numeric CSV (rows = samples)")
    p.add_argument("--csv-header", action="store_true", help="skip the first CSV line")

    p = sub.add_parser("train", parents=parents, help="fine-tune adapters from a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (default: <out>/checkpoint.evac)")
    p.add_argument("--steps", type=int, help="override config steps")

    p = sub.add_parser("compare", parents=parents, help="paired multi-seed comparison of init modes")
    p.add_argument("--modes", type=_modes, default=["eva", "random"], help="comma-separated modes (default eva,random)")
    p.add_argument("--seeds", type=int, help="number of seeds 0..N-1 (default 5)")
    p.add_argument("--seed-list", type=_ints, help="explicit comma-separated seeds")
    p.add_argument("--steps", type=int, help="override config steps")
    p.add_argument("--threshold-factor", type=float, default=2.0, help="loss threshold in noise floors (default 2)")
    p.add_argument("--workers", type=int, help="worker processes (default EVA_THREADS or CPU count)")

    p = sub.add_parser("report", parents=parents, help="render CSV/SVG reports from checkpoints or metrics")
    p.add_argument("inputs", nargs="+", type=Path, help="checkpoint (.evac) or metrics CSV files")

    p = sub.add_parser("rho-sweep", parents=parents, help="rank allocation across a list of rho values")
    p.add_argument("--rhos", type=_floats, default=[1.0, 1.5, 2.0, 2.5, 3.0], help="comma-separated rho values")
    p.add_argument("--workers", type=int, help="worker processes (default EVA_THREADS or CPU count)")
    return parser


# --- helpers ------------------------------------------------------------------

def _config(args) -> fio.ExperimentConfig:
    cfg = fio.read_config(args.config) if args.config else fio.ExperimentConfig()
    changes = {}
    for key in ("seed", "rank", "rho", "mode", "steps"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    cfg = cfg.replace(**changes)
    fio.validate_config(cfg)
    return cfg


def _task(args) -> TaskConfig:
    task = TaskConfig(width=args.width, depth=args.depth, z_dim=args.z_dim, attention=not args.no_attention,
                      perturbation=args.perturbation, target_noise=args.target_noise)
    task.validate()
    return task


def _stream(cfg: fio.ExperimentConfig, args) -> StreamConfig:
    return StreamConfig(r=cfg.rank, rho=cfg.rho, tau=cfg.tau, delta=cfg.delta,
                        max_batches=getattr(args, "max_batches", 500), seed=cfg.seed)


def _train_cfg(cfg: fio.ExperimentConfig) -> TrainConfig:
    return TrainConfig(steps=cfg.steps, lr=cfg.lr, optimizer=cfg.optimizer, batch_size=cfg.batch_size, seed=cfg.seed)


def _mode(cfg: fio.ExperimentConfig) -> InitMode:
    return InitMode(cfg.mode, seed=cfg.seed, whiten_exponent=cfg.whiten_exponent)


def _workers(args) -> int:
    return args.workers if getattr(args, "workers", None) else default_workers()


def _csv_rows(header: list[str], rows) -> str:
    return ",".join(header) + "\n" + "".join(",".join(str(v) for v in row) + "\n" for row in rows)


def _num(x: float) -> str:
    return f"{x:.17g}"


def read_numeric_csv(path: Path, header: bool) -> np.ndarray:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            data = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise fio.FormatError(f"{path}: {exc}") from None
    if data.size == 0 or not np.all(np.isfinite(data)):
        raise fio.FormatError(f"{path}: empty or non-finite CSV")
    return data


# --- commands -----------------------------------------------------------------

def cmd_collect(args) -> int:
    cfg = _config(args)
    _, student, data = make_teacher_student(_task(args), cfg.seed)
    names = set(student.layer_names())
    chunks: dict[str, list] = {n: [] for n in student.layer_names()}
    stream = data.stream(args.rows, cfg.seed + INIT_STREAM_OFFSET, cfg.mask)
    for _ in range(args.batches):
        _, taps = forward_with_taps(student, next(stream), names)
        for n, rows in taps.items():
            chunks[n].append(rows)
    path = args.out / args.name
    fio.write_dump(path, {n: np.vstack(c) for n, c in chunks.items()})
    print(f"wrote {len(chunks)} layers x {args.batches} batches to {path}")
    return 0


def _run_init(args, cfg):
    task = _task(args)
    stream = _stream(cfg, args)
    mode = _mode(cfg)
    _, student, data = make_teacher_student(task, cfg.seed)
    if args.data == "synthetic":
        batches = data.stream(args.init_rows, cfg.seed + INIT_STREAM_OFFSET, cfg.mask) if mode.needs_states else None
        res = initialize(student, mode, stream, batches, measure=cfg.measure, alpha=cfg.alpha)
        hosts = student
    else:
        path = Path(args.data)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        if path.suffix.lower() == ".csv":
            acts = {path.stem: read_numeric_csv(path, args.csv_header)}
        else:
            acts = fio.read_dump(path)
        res = initialize_from_activations(acts, mode, stream, args.init_rows, net=student,
                                          measure=cfg.measure, alpha=cfg.alpha)
        hosts = activation_hosts(acts, student)
    return res, hosts


def cmd_init(args) -> int:
    cfg = _config(args)
    res, hosts = _run_init(args, cfg)
    ckpt = fio.EvaCheckpoint.build(hosts, res.adapters, cfg.alpha, cfg.measure, res.states,
                                   layers=list(res.allocation.ranks))
    fio.write_checkpoint(args.out / "checkpoint.evac", ckpt)
    fio.atomic_write(args.out / "allocation.csv", res.allocation.to_csv())
    print(f"mode: {cfg.mode}  rank: {cfg.rank}  rho: {cfg.rho}")
    print(f"batches consumed (T): {res.batches}")
    if res.pass_result is not None:
        for name, st in res.states.items():
            status = "converged" if st.converged else "UNCONVERGED"
            print(f"  {name:<10} rank {res.allocation.ranks[name]:>3}  {status}  samples {st.samples_seen}")
        if res.pass_result.all_converged:
            print(f"converged after {res.batches} batches")
        else:
            print(f"warning: {len(res.pass_result.unconverged)} layers unconverged after {res.batches} batches")
    print(f"wall-clock: {res.seconds:.3f} s")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ckpt_path = args.checkpoint or args.out / "checkpoint.evac"
    ckpt = fio.read_checkpoint(ckpt_path)
    _, student, data = make_teacher_student(_task(args), cfg.seed)
    adapters = ckpt.adapters()
    layers = student.layers()
    unknown = set(adapters) - set(layers)
    if unknown:
        raise fio.FormatError(f"checkpoint layers not in the network: {sorted(unknown)}")
    metrics = finetune(student, adapters, data, replace(_train_cfg(cfg), threshold=2 * data.noise_floor))
    fio.write_metrics_csv(args.out / "metrics.csv", metrics.records)
    fio.write_network(args.out / "merged.evan", merge_network(student, adapters))
    print(f"steps: {len(metrics.records)}  final loss: {metrics.final_loss:.6g}  "
          f"grad norm at step 1: {metrics.records[0].grad_norm:.6g}")
    if metrics.steps_to_threshold is not None:
        print(f"reached 2x noise floor at step {metrics.steps_to_threshold}")
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    if len(args.modes) < 2:
        raise UsageError("compare needs at least two modes")
    seeds = args.seed_list or list(range(args.seeds if args.seeds is not None else 5))
    if not seeds:
        raise UsageError("need at least one seed")
    modes = [InitMode(m, whiten_exponent=cfg.whiten_exponent) for m in args.modes]
    stream = _stream(cfg, args)
    report = compare_inits(modes, seeds, _train_cfg(cfg), task=_task(args), stream=stream,
                           init_rows=args.init_rows, threshold_factor=args.threshold_factor,
                           workers=min(_workers(args), len(modes) * len(seeds)))
    out = args.out
    labels, seen = [], {}
    for m in report.modes:
        seen[m.label] = seen.get(m.label, 0) + 1
        labels.append(m.label if seen[m.label] == 1 else f"{m.label}-{seen[m.label]}")
    losses, gnorms = {}, {}
    for label, m in zip(labels, report.modes):
        for run in m.runs:
            if run.metrics is not None:
                fio.write_metrics_csv(out / f"{label}_seed{run.seed}.csv", run.metrics.records)
            else:
                print(f"warning: {label} seed {run.seed} failed: {run.error}")
        if not m.ok:
            continue
        loss, gn = m.mean_loss_curve, m.mean_grad_norm_curve
        fio.atomic_write(out / f"{label}_metrics.csv", _csv_rows(
            ["step", "loss", "grad_norm"], ((i + 1, _num(a), _num(b)) for i, (a, b) in enumerate(zip(loss, gn)))))
        losses[label], gnorms[label] = loss, gn
    cols = ["mode", "mean_final_loss", "std_final_loss", "mean_steps_to_threshold", "mean_gradnorm_step1"]
    rows = [[r["mode"]] + [_num(r[c]) for c in cols[1:]] for r in report.rows()]
    fio.atomic_write(out / "summary.csv", _csv_rows(cols, rows))
    fio.atomic_write(out / "loss.svg", plots.line_chart(losses, "Training loss (mean over seeds)", "loss", log_y=True))
    fio.atomic_write(out / "grad_norm.svg", plots.line_chart(gnorms, "Adapter gradient norm (mean over seeds)", "grad norm"))
    for row in rows:
        print("  ".join(f"{c}={v}" for c, v in zip(cols, row)))
    return 0 if not any(m.partial for m in report.modes) else 3


def _sweep_one(job):
    task, cfg_stream, seed, init_rows, mask, r, rho, measure = job
    _, student, data = make_teacher_student(task, seed)
    allocs = rho_sweep(student, lambda: data.stream(init_rows, seed + INIT_STREAM_OFFSET, mask), r, [rho],
                       cfg_stream, measure)
    return allocs[rho]


def cmd_rho_sweep(args) -> int:
    cfg = _config(args)
    rhos = args.rhos
    if not rhos or any(r < 1 for r in rhos):
        raise UsageError("every rho must be >= 1")
    unique = list(dict.fromkeys(rhos))
    jobs = [(_task(args), _stream(cfg, args), cfg.seed, args.init_rows, cfg.mask, cfg.rank, rho, cfg.measure)
            for rho in unique]
    workers = min(_workers(args), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    allocs = dict(zip(unique, results))
    layers, mat = allocation_matrix(allocs, rhos)
    heads = [f"rho={rho:g}" for rho in rhos]
    fio.atomic_write(args.out / "rho_allocation.csv",
                     _csv_rows(["layer"] + heads, ([n] + list(row) for n, row in zip(layers, mat))))
    pairs = list(zip(rhos, rhos[1:]))
    deltas = np.array([[allocation_delta(allocs[a], allocs[b])[n] for a, b in pairs] for n in layers], dtype=int)
    dheads = [f"{a:g}->{b:g}" for a, b in pairs]
    fio.atomic_write(args.out / "rho_delta.csv",
                     _csv_rows(["layer"] + dheads, ([n] + list(row) for n, row in zip(layers, deltas.reshape(len(layers), -1)))))
    fio.atomic_write(args.out / "rho_allocation.svg",
                     plots.heatmap(mat, layers, [f"{r:g}" for r in rhos], f"Ranks per layer (r={cfg.rank})"))
    if pairs:
        fio.atomic_write(args.out / "rho_delta.svg",
                         plots.heatmap(deltas, layers, dheads, "Rank deltas between consecutive rho", diverging=True))
    print("layer," + ",".join(heads))
    for n, row in zip(layers, mat):
        print(n + "," + ",".join(str(v) for v in row))
    for (a, b), col in zip(pairs, deltas.T):
        print(f"l1 delta {a:g}->{b:g}: {int(np.abs(col).sum())}")
    return 0


def cmd_report(args) -> int:
    curves = {}
    for path in args.inputs:
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        head = path.read_bytes()[:4]
        if head == fio.CKPT_MAGIC:
            ckpt = fio.read_checkpoint(path)
            stem = path.stem
            rows = [(l.name, l.rank, l.samples_seen, int(l.converged)) for l in ckpt.layers]
            fio.atomic_write(args.out / f"{stem}_allocation.csv",
                             _csv_rows(["layer", "rank", "samples_seen", "converged"], rows))
            fio.atomic_write(args.out / f"{stem}_allocation.svg",
                             plots.heatmap(np.array([[l.rank] for l in ckpt.layers]), [l.name for l in ckpt.layers],
                                           ["rank"], f"Rank allocation ({ckpt.measure})"))
            print(f"{path}: alpha={ckpt.alpha:g} measure={ckpt.measure} rank total={ckpt.rank_total}")
            for name, rank, seen, conv in rows:
                print(f"  {name:<10} rank {rank:>3}  samples {seen}  {'converged' if conv else 'unconverged'}")
        else:
            recs = fio.read_metrics_csv(path)
            curves[path.stem] = recs
    if curves:
        fio.atomic_write(args.out / "report_loss.svg", plots.line_chart(
            {k: [r.loss for r in v] for k, v in curves.items()}, "Training loss", "loss", log_y=True))
        fio.atomic_write(args.out / "report_grad_norm.svg", plots.line_chart(
            {k: [r.grad_norm for r in v] for k, v in curves.items()}, "Adapter gradient norm", "grad norm"))
        for k, v in curves.items():
            print(f"{k}: {len(v)} steps, final loss {v[-1].loss:.6g}, grad norm at step 1 {v[0].grad_norm:.6g}")
    return 0


COMMANDS = {
    "collect": cmd_collect,
    "init": cmd_init,
    "train": cmd_train,
    "compare": cmd_compare,
    "report": cmd_report,
    "rho-sweep": cmd_rho_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"evalora {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"evalora {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (fio.FormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"evalora {args.command}: data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
