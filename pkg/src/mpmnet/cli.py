"""``mpmnet train|eval|attack|mpm-solve|report``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report as R
from .attacks import AccuracyRow, AttackReport, ExampleRecord, eval_attack_grid, perturbation_gap
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, build_config
from .data import BinaryTask, load_dataset, make_binary_task
from .errors import ConfigError, FormatError, MpmnetError, TaskError
from .mpm import predict_labels, solve_classical_mpm, stats_from_arrays
from .network import Model, accuracy
from .training import train_model

log = logging.getLogger("mpmnet")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _config(args) -> RunConfig:
    return build_config(args.config, args.preset, _overrides(args))


def load_task(cfg: RunConfig, split: str, digit: Optional[int] = None) -> tuple[BinaryTask, str]:
    ds = load_dataset(cfg.dataset, split, cfg.data_dir)
    n = cfg.train_samples if split == "train" else cfg.test_samples
    if n is not None:
        ds = ds.subset(n)
    task = make_binary_task(ds, cfg.positive_digit if digit is None else digit)
    return task, ds.digest


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_epoch(e) -> None:
    acc = "n/a" if e.test_accuracy is None else R.fmt_num(e.test_accuracy)
    print(f"epoch {e.epoch} lr {R.fmt_num(e.lr)} loss {R.fmt_num(e.loss)} test_accuracy {acc}", flush=True)


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = _config(args)
    out = _out_dir(args)
    train, h_train = load_task(cfg, "train")
    test, h_test = load_task(cfg, "test")
    model = Model.create(cfg.dataset, cfg.head, seed=cfg.seed)
    model.arch.input_mean, model.arch.input_std = cfg.input_mean, cfg.input_std
    model.meta.update(positive_digit=cfg.positive_digit, train_samples=len(train), seed=cfg.seed)
    history = train_model(model, train.images, train.labels, cfg.train_config(),
                          test=(test.images, test.labels), on_epoch=_print_epoch)
    ckpt = save_checkpoint(model, out / "checkpoint")
    R.write_metrics(out / "metrics.csv", history)
    R.write_step_losses(out / "step_losses.csv", history.step_losses)
    metrics = {"test_accuracy": accuracy(model, test.images, test.labels)}
    if history.epochs:
        metrics["final_loss"] = history.epochs[-1].loss
    if model.solution is not None:
        metrics["b_star"] = model.solution.b_star
        metrics["alpha_star"] = model.solution.alpha_star
    R.RunManifest("train", cfg.snapshot(), cfg.seed, {"train": h_train, "test": h_test},
                  str(ckpt), metrics, time.time() - t0).write(out)
    print(f"test_accuracy = {R.fmt_num(metrics['test_accuracy'])}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    cfg = _config(args)
    out = _out_dir(args)
    model = load_checkpoint(args.checkpoint)
    if model.arch.dataset != cfg.dataset:
        raise ConfigError(f"checkpoint was trained on {model.arch.dataset}, config says {cfg.dataset}")
    digit = model.meta.get("positive_digit", cfg.positive_digit)
    rows, hashes, metrics = [], {}, {}
    for split in args.split:
        task, digest = load_task(cfg, split, digit)
        acc = accuracy(model, task.images, task.labels)
        rows.append((digit, split, len(task), acc))
        hashes[split] = digest
        metrics[f"{split}_accuracy"] = acc
        print(f"{split}_accuracy = {R.fmt_num(acc)}")
    R.write_csv(out / "eval.csv", ("task", "split", "n", "accuracy"), rows)
    R.RunManifest("eval", cfg.snapshot(), cfg.seed, hashes, str(args.checkpoint),
                  metrics, time.time() - t0).write(out)
    return 0


def _task_key(model: Model) -> tuple:
    return model.arch.dataset, model.meta.get("positive_digit")


def cmd_attack(args) -> int:
    t0 = time.time()
    cfg = _config(args)
    out = _out_dir(args)
    model_a, model_b = load_checkpoint(args.checkpoint_a), load_checkpoint(args.checkpoint_b)
    if _task_key(model_a) != _task_key(model_b):
        raise ConfigError(f"checkpoints are on different tasks: {_task_key(model_a)} vs {_task_key(model_b)}")
    if model_a.arch.dataset != cfg.dataset:
        raise ConfigError(f"checkpoints are {model_a.arch.dataset} models, config says {cfg.dataset}")
    digit = model_a.meta.get("positive_digit", cfg.positive_digit)
    test, digest = load_task(cfg, "test", digit)
    names = (args.name_a, args.name_b)
    grid = cfg.fgsm_grid() if args.kind == "fgsm" else cfg.cw_config()
    rep = eval_attack_grid(model_a, model_b, test.images, test.labels, args.kind, grid,
                           names=names, max_examples=cfg.attack_examples, fgsm_mode=cfg.fgsm_mode)
    metrics = write_attack_outputs(out, rep)
    metrics["jointly_correct"] = rep.n_jointly_correct
    R.RunManifest(f"attack {args.kind}", cfg.snapshot(), cfg.seed, {"test": digest},
                  f"{args.checkpoint_a};{args.checkpoint_b}", metrics, time.time() - t0).write(out)
    return 0


def write_attack_outputs(out: Path, rep: AttackReport) -> dict[str, float]:
    """attack_report.csv, attack_examples.csv, curves.svg and (C&W) gap.csv."""
    R.write_attack_report(out / "attack_report.csv", rep)
    R.write_attack_examples(out / "attack_examples.csv", rep)
    metrics = {f"{r.source}->{r.target}@{R.fmt_num(r.param)}": r.accuracy for r in rep.rows}
    if rep.attack == "fgsm":
        header, rows = R.fgsm_wide_table(rep)
        R.write_csv(out / "fgsm_table.csv", header, rows)
        (out / "curves.svg").write_text(R.curves_svg(rep, title="FGSM"))
    else:
        a, b = rep.names
        gap = perturbation_gap(rep.self_records(b), rep.self_records(a))
        R.write_gap(out / "gap.csv", gap)
        (out / "curves.svg").write_text(R.matrix_svg(rep, gap))
        metrics["gap_mean"] = gap.mean
        metrics["gap_count"] = len(gap.differences)
    for k, v in metrics.items():
        print(f"{k} = {R.fmt_num(v)}")
    return metrics


def report_from_csv(report_csv, examples_csv=None) -> AttackReport:
    header, rows = R.read_csv(report_csv)
    if header != ["attack", "source", "target", "param", "accuracy"]:
        raise FormatError(f"{report_csv} does not look like an attack report")
    if not rows:
        raise FormatError(f"{report_csv} has no rows")
    names = tuple(dict.fromkeys(r[1] for r in rows))
    if len(names) != 2:
        raise FormatError("attack report must name exactly two models")
    rep = AttackReport(rows[0][0], names, np.zeros(0, dtype=int))
    rep.rows = [AccuracyRow(r[1], r[2], float(r[3]), float(r[4])) for r in rows]
    if examples_csv is not None and Path(examples_csv).exists():
        _, ex = R.read_csv(examples_csv)
        rep.examples = [ExampleRecord(int(e[0]), e[1], e[2], float(e[3]), e[4] == "1",
                                      float(e[5]), float(e[6])) for e in ex]
        rep.indices = np.array(sorted({e.index for e in rep.examples}))
    return rep


def cmd_report(args) -> int:
    src = Path(args.input)
    out = _out_dir(args)
    rep = report_from_csv(src / "attack_report.csv", src / "attack_examples.csv")
    if rep.attack == "fgsm":
        (out / "curves.svg").write_text(R.curves_svg(rep, title="FGSM"))
        header, rows = R.fgsm_wide_table(rep)
        R.write_csv(out / "fgsm_table.csv", header, rows)
    else:
        a, b = rep.names
        gap = perturbation_gap(rep.self_records(b), rep.self_records(a)) if rep.examples else None
        (out / "curves.svg").write_text(R.matrix_svg(rep, gap))
        if gap is not None:
            R.write_gap(out / "gap.csv", gap)
    for r in rep.rows:
        print(f"{r.source}->{r.target}@{R.fmt_num(r.param)} = {R.fmt_num(r.accuracy)}")
    return 0


def _read_numeric_csv(path) -> np.ndarray:
    """Numeric CSV; a non-numeric first row is taken as a header and skipped."""
    header, rows = R.read_csv(path)
    try:
        [float(v) for v in header]
        rows = [header] + rows
    except ValueError:
        pass
    try:
        arr = np.array([[float(v) for v in r] for r in rows if r], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric entry") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise FormatError(f"{path}: expected a non-empty table")
    return arr


def cmd_mpm_solve(args) -> int:
    feats = _read_numeric_csv(args.features)
    labels = _read_numeric_csv(args.labels).reshape(-1)
    if len(labels) != len(feats):
        raise FormatError(f"{len(feats)} feature rows but {len(labels)} labels")
    if not np.all(np.isin(labels, (-1, 1))):
        raise FormatError("labels must be +1 or -1")
    labels = labels.astype(np.int64)
    if len(np.unique(labels)) < 2:
        raise TaskError("labels contain a single class")
    stats = stats_from_arrays(feats, labels, args.cov_reg)
    sol = solve_classical_mpm(stats.mean_x.data, stats.mean_y.data, stats.cov_x.data, stats.cov_y.data)
    acc = 100.0 * float(np.mean(predict_labels(sol, feats) == labels))
    print("a_star = " + ",".join(R.fmt_num(v) for v in sol.a_star))
    print(f"b_star = {R.fmt_num(sol.b_star)}")
    print(f"alpha_star = {R.fmt_num(sol.alpha_star)}")
    print(f"train_accuracy = {R.fmt_num(acc)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpmnet", description="DeepMPM training and adversarial evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs/out"):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--preset", help="desk-mnist, full-mnist, desk-cifar10, full-cifar10")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out-dir", default=out_default)

    sp = sub.add_parser("train", help="train one model and write a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint on its task")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--split", action="append", choices=("train", "test"))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("attack", help="FGSM or C&W between two checkpoints")
    common(sp)
    sp.add_argument("kind", choices=("fgsm", "cw"))
    sp.add_argument("checkpoint_a")
    sp.add_argument("checkpoint_b")
    sp.add_argument("--name-a", default="cnn")
    sp.add_argument("--name-b", default="mpm")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("mpm-solve", help="classical MPM on CSV features")
    sp.add_argument("features")
    sp.add_argument("labels")
    sp.add_argument("--cov-reg", type=float, default=0.0)
    sp.set_defaults(func=cmd_mpm_solve)

    sp = sub.add_parser("report", help="re-render SVG and tables from an attack run directory")
    sp.add_argument("input")
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "split", None) is None and args.command == "eval":
        args.split = ["test"]
    if args.command == "report" and args.out_dir is None:
        args.out_dir = args.input
    try:
        return args.func(args)
    except (MpmnetError, FileNotFoundError, OSError) as exc:
        print(f"mpmnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
