"""Command-line entry point: ``nbp <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or failed verification, 2 numerical
failure (non-finite values), 3 file-system error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_model
from .diffusion import SamplerConfig, conditional_sample
from .evaluation import compare, evaluate_run, read_report
from .numerics import NonFiniteError
from .plotting import function_panel_svg, loss_curves_svg, smooth
from .schedule import build_schedule
from .synthdata import read_tasks, sample_gp_task, task_seed, write_tasks
from .trainer import load_checkpoint, read_metrics, train
from .verify import format_table, run_identity_suite

log = logging.getLogger("nbp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        rc = dataclasses.replace(rc, train=dataclasses.replace(rc.train, seed=args.seed))
    rc.validate()
    return rc


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_from_checkpoint(path, use_ema: bool = True):
    state, manifest = load_checkpoint(path)
    rc = RunConfig.from_dict(manifest["config"])
    return build_model(rc, state.ema if use_ema else state.params), rc


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_identity_suite(ablation=args.ablation)
    sys.stdout.write(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    rc = _run_config(args)
    sched = build_schedule(rc.schedule, bridge=rc.diffusion.bridge_enabled)
    _write_text(Path(args.out) if args.out else None, sched.to_csv())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out) if args.out else _out_dir(args) / "tasks.jsonl"
    tasks = (sample_gp_task(rc.data, rc.kernel, task_seed(seed, i)) for i in range(args.n_tasks))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_tasks(out, tasks)
    log.info("wrote %d tasks to %s", args.n_tasks, out)
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        state, manifest = load_checkpoint(args.resume)
        rc = RunConfig.from_dict(manifest["config"])
        out = Path(args.out_dir) if args.out_dir_given else Path(args.resume).parent
        if state.step >= rc.train.total_steps:
            print(f"run already complete at step {state.step} of {rc.train.total_steps}; nothing to do")
            return EXIT_OK
        model = build_model(rc, state.params)
        log.info("resuming from step %d", state.step)
    else:
        rc = _run_config(args)
        out = _out_dir(args)
        model = build_model(rc)
        state = None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(rc.to_json(), encoding="utf-8")

    spe = rc.train.steps_per_epoch

    def progress(row):
        if row["step"] % spe == spe - 1 or rc.train.log_every >= spe:
            log.info("epoch %d step %d lr %.3g loss %.5f", row["epoch"], row["step"], row["lr"], row["train_loss"])

    train(model, rc.data, rc.kernel, rc.train, out, run_config=rc.to_dict(), resume=state, progress=progress)
    log.info("wrote %s", out / "checkpoint.json")
    return EXIT_OK


def cmd_sample(args) -> int:
    model, _ = _model_from_checkpoint(args.checkpoint)
    tasks = read_tasks(args.task_file)
    if not 0 <= args.task_index < len(tasks):
        raise ValueError(f"task index {args.task_index} outside 0..{len(tasks) - 1}")
    task = tasks[args.task_index]
    x_c, y_c = task.context()
    x_t, _ = task.target()
    seed = 0 if args.seed is None else args.seed
    sampler = SamplerConfig(repaint_repeats=args.repaint, seed=seed, init=args.init)
    samples = conditional_sample(x_c, y_c, x_t, model, sampler, n_samples=args.n_samples, d_y=task.y.shape[1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d_x, d_y = x_t.shape[1], samples.shape[2]
    w.writerow(["sample", "point"] + [f"x{i}" for i in range(d_x)] + [f"y{i}" for i in range(d_y)])
    for s in range(samples.shape[0]):
        for p in range(samples.shape[1]):
            w.writerow([s, p] + [repr(float(v)) for v in x_t[p]] + [repr(float(v)) for v in samples[s, p]])
    out = Path(args.out) if args.out else _out_dir(args) / "samples.csv"
    _write_text(out, buf.getvalue())
    return EXIT_OK


def cmd_eval(args) -> int:
    model, rc = _model_from_checkpoint(args.checkpoint)
    tasks = read_tasks(args.task_file)
    if args.n_tasks is not None:
        tasks = tasks[: args.n_tasks]
    overrides = {k: v for k, v in (("n_samples", args.n_samples), ("repaint", args.repaint), ("seed", args.seed)) if v is not None}
    protocol = dataclasses.replace(rc.eval, n_tasks=len(tasks), **overrides)
    label = args.label or ("NBP" if rc.diffusion.bridge_enabled else "NDP")

    def progress(i, rec):
        log.info("task %d/%d loglik %.4f mse %.4f", i + 1, len(tasks), rec.loglik, rec.mse)

    report = evaluate_run(model, tasks, protocol, label=label, progress=progress)
    csv_path, json_path = report.write(_out_dir(args), args.stem)
    sys.stdout.write(report.to_json())
    log.info("wrote %s and %s", csv_path, json_path)
    return EXIT_OK


def cmd_compare(args) -> int:
    cmp = compare(read_report(args.report_a), read_report(args.report_b))
    text = cmp.to_text()
    sys.stdout.write(text)
    if args.out:
        _write_text(Path(args.out), text)
    return EXIT_OK


def _read_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no samples")
    n_s = max(int(r["sample"]) for r in rows) + 1
    n_p = max(int(r["point"]) for r in rows) + 1
    x = np.zeros(n_p)
    ys = np.zeros((n_s, n_p))
    for r in rows:
        x[int(r["point"])] = float(r["x0"])
        ys[int(r["sample"]), int(r["point"])] = float(r["y0"])
    return x, ys


def cmd_plot_samples(args) -> int:
    x, ys = _read_samples_csv(args.samples)
    ctx = tgt = (None, None)
    if args.task_file:
        task = read_tasks(args.task_file)[args.task_index]
        if task.x.shape[1] != 1:
            raise ValueError("function panels need 1-D inputs")
        ctx, tgt = task.context(), task.target()
    svg = function_panel_svg(x, ys, ctx[0], ctx[1], tgt[0], tgt[1], title=args.title)
    out = Path(args.out) if args.out else _out_dir(args) / "samples.svg"
    _write_text(out, svg)
    return EXIT_OK


def cmd_plot_loss(args) -> int:
    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.metrics]
    if len(labels) != len(args.metrics):
        raise ValueError("need one label per metrics file")
    curves = {}
    for label, path in zip(labels, args.metrics):
        rows = read_metrics(path)
        curves[label] = ([r["step"] for r in rows], smooth([r["train_loss"] for r in rows], args.smooth))
    out = Path(args.out) if args.out else _out_dir(args) / "loss.svg"
    _write_text(out, loss_curves_svg(curves))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="directory for outputs (default: .)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only log warnings")

    p = argparse.ArgumentParser(prog="nbp", description="Bridge diffusion over functions.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify", parents=[common], help="run the identity suite")
    s.add_argument("--ablation", action="store_true", help="check the bridge-free schedule instead")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("schedule", parents=[common], help="schedule tools")
    ss = s.add_subparsers(dest="schedule_command", required=True)
    d = ss.add_parser("dump", parents=[common], help="write the coefficient table as CSV")
    d.add_argument("--out", help="CSV path (default: stdout)")
    d.set_defaults(func=cmd_schedule_dump)

    s = sub.add_parser("gen-data", parents=[common], help="write GP tasks as JSON lines")
    s.add_argument("--n-tasks", type=int, default=128)
    s.add_argument("--out", help="output file (default: <out-dir>/tasks.jsonl)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--resume", help="checkpoint manifest to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw conditional samples for one task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task-file", required=True)
    s.add_argument("--task-index", type=int, default=0)
    s.add_argument("--n-samples", type=int, default=128)
    s.add_argument("--repaint", type=int, default=5)
    s.add_argument("--init", choices=("gamma_bar", "gamma"), default="gamma_bar", help="endpoint coefficient for the start")
    s.add_argument("--out", help="CSV path (default: <out-dir>/samples.csv)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a task file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task-file", required=True)
    s.add_argument("--n-tasks", type=int)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--repaint", type=int)
    s.add_argument("--label")
    s.add_argument("--stem", default="report", help="report file stem")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common], help="compare two report JSON files")
    s.add_argument("report_a")
    s.add_argument("report_b")
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("plot", parents=[common], help="write SVG figures")
    ps = s.add_subparsers(dest="plot_command", required=True)
    d = ps.add_parser("samples", parents=[common], help="function panel from a samples CSV")
    d.add_argument("--samples", required=True)
    d.add_argument("--task-file")
    d.add_argument("--task-index", type=int, default=0)
    d.add_argument("--title", default="conditional samples")
    d.add_argument("--out")
    d.set_defaults(func=cmd_plot_samples)
    d = ps.add_parser("loss", parents=[common], help="overlay training-loss curves")
    d.add_argument("--metrics", nargs="+", required=True)
    d.add_argument("--labels", nargs="+")
    d.add_argument("--smooth", type=int, default=1, help="moving-average window")
    d.add_argument("--out")
    d.set_defaults(func=cmd_plot_loss)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.out_dir_given = hasattr(args, "out_dir")
    for name, default in (("seed", None), ("out_dir", "."), ("config", None), ("quiet", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
