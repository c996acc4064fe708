"""Command-line entry point: ``dffw <command> [--config PATH] [options]``.

Commands: generate, train, evaluate, classify, predict, sweep. Every
command writes its outputs plus a canonical ``config.txt`` echo into
``--out``. Failures exit nonzero with one line on stderr of the form
``error code=<code> type=<exception> message=<text>``.
"""
from __future__ import annotations

import argparse
import csv
import glob
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint as ckpt_mod
from .config import ConfigError, RunConfig
from .data import (
    PRESENT_NAMES, TrajectoryTooShortError, build_samples, generate_dataset, history_feedback,
    kfold_by_trajectory, read_trajectories, write_norm_stats, write_trajectories,
)
from .experiment import (
    ExperimentConfig, FoldData, cv_reports, evaluate_classification, evaluate_multistep,
    evaluate_present_step, fit_model, prepare_fold, run_cv, sweep, write_sweep, write_sweep_errors,
)
from .inference import classify, predict_multistep
from .metrics import EvalReport, write_report
from .training import NonFiniteParameterError, write_epoch_log

log = logging.getLogger("dffw")

REPORT_COMMENT = ("regression metrics are computed per test trajectory on the 3D coordinates; "
                  "p-values are per trajectory, then averaged")


class CommandError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- helpers -------------------------------------------------------------------

def _ensure_out(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CommandError("unwritable_output", f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CommandError("unwritable_output", f"output directory not writable: {path}")
    return path


def _echo_config(cfg: RunConfig, out: str) -> None:
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())


def _load_dataset(data_dir: str):
    paths = sorted(glob.glob(os.path.join(data_dir, "class_*.csv")))
    if not paths:
        raise CommandError("missing_dataset", f"no class_*.csv trajectory files in {data_dir}")
    return read_trajectories(paths)


def _load_ckpt(path: str):
    if path is None:
        raise CommandError("missing_checkpoint", "this command needs --checkpoint")
    if not os.path.isfile(path):
        raise CommandError("missing_checkpoint", f"checkpoint not found: {path}")
    return ckpt_mod.load_checkpoint(path)


def _checkpoint_fold(ckpt, trajs, samples, cfg: RunConfig) -> FoldData:
    """The checkpoint's fold, normalized with the checkpoint's own stats."""
    d = ckpt.params.dims
    n_classes = max(t.class_id for t in trajs) + 1
    got = (samples.present.shape[1], samples.hist.shape[1], n_classes)
    want = (d.n_v, d.n_vlt, d.n_l)
    if got != want:
        raise CommandError("dims_mismatch", f"dataset (present, history, labels) = {got} "
                                            f"but checkpoint dims expect {want}")
    if ckpt.norm is None:
        raise CommandError("missing_normalizer", "checkpoint carries no normalization statistics")
    fold = ckpt.fold if ckpt.fold is not None else cfg["cv.fold"]
    train_ids, test_ids = kfold_by_trajectory(trajs, cfg["cv.n_train"])[fold]
    test_raw = samples.for_trajectories(test_ids)
    train_raw = samples.for_trajectories(train_ids)
    return FoldData(fold, train_ids, test_ids, ckpt.norm, ckpt.norm.apply(train_raw),
                    ckpt.norm.apply(test_raw), test_raw)


def _experiment_for(ckpt, cfg: RunConfig) -> ExperimentConfig:
    return replace(cfg.experiment(), history=ckpt.params.dims.n_vlt // 2, n_h=ckpt.params.dims.n_h,
                   n_f=ckpt.params.dims.n_f1)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# -- commands ------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> None:
    sim = cfg.sim()
    history = cfg["data.history"]
    if sim.frames <= history:
        raise CommandError("trajectory_too_short",
                           f"trajectory shorter than history: frames={sim.frames} <= history={history}")
    out = _ensure_out(args.out)
    trajs = generate_dataset(sim)
    for t in trajs:
        if len(t) <= history:
            raise CommandError("trajectory_too_short", f"trajectory shorter than history: trajectory "
                                                       f"{t.traj_id} has {len(t)} frames, history={history}")
    for cls in range(sim.n_classes):
        write_trajectories(os.path.join(out, f"class_{cls}.csv"), [t for t in trajs if t.class_id == cls])
    _write_rows(os.path.join(out, "manifest.csv"), ["traj_id", "class_id", "frames", "seed"],
                [[t.traj_id, t.class_id, len(t), sim.seed] for t in trajs])
    _echo_config(cfg, out)
    print(f"wrote {len(trajs)} trajectories ({sum(len(t) for t in trajs)} frames) to {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    exp = cfg.experiment()
    trajs = _load_dataset(args.data or cfg["data.dir"])
    out = _ensure_out(args.out)
    samples = build_samples(trajs, exp.history)
    fold = cfg["cv.fold"]
    splits = kfold_by_trajectory(trajs, exp.n_train)
    if not 0 <= fold < len(splits):
        raise CommandError("bad_fold", f"cv.fold={fold} outside 0..{len(splits) - 1}")
    data = prepare_fold(samples, fold, *splits[fold])
    params, history = fit_model(cfg["kind"], data.train, exp)
    ckpt = ckpt_mod.ModelCheckpoint(params, data.stats, exp.train, exp.init_seed, fold)
    ckpt_mod.save_checkpoint(os.path.join(out, "model.ckpt"), ckpt)
    write_epoch_log(history, os.path.join(out, "epoch_log.csv"))
    write_norm_stats(os.path.join(out, "norm_stats.csv"), data.stats)
    _echo_config(cfg, out)
    print(f"trained {cfg['kind']} on fold {fold} ({len(data.train)} samples, "
          f"{exp.train.epochs} epochs); checkpoint {os.path.join(out, 'model.ckpt')}")


def _fold_rows(results):
    rows = []
    for kind, folds in results.items():
        for r in folds:
            row = [kind, r.fold, _fmt(r.accuracy), _fmt(r.mean("nrmse")), _fmt(r.mean("pcc"))]
            for k in sorted(r.multistep):
                scores = r.multistep[k]
                row += [_fmt(r.mean("nrmse", k)) if scores else "nan"]
            row.append("" if r.rollout_failed_step is None else r.rollout_failed_step)
            rows.append(row)
    return rows


def cmd_evaluate(cfg: RunConfig, args) -> None:
    tasks = set(cfg["eval.tasks"])
    out = _ensure_out(args.out)
    trajs = _load_dataset(args.data or cfg["data.dir"])
    if args.checkpoint:
        ckpt = _load_ckpt(args.checkpoint)
        exp = _experiment_for(ckpt, cfg)
        samples = build_samples(trajs, exp.history)
        data = _checkpoint_fold(ckpt, trajs, samples, cfg)
        reports = []
        if "classification" in tasks:
            acc, _ = evaluate_classification(ckpt.params, data, exp)
            rep = EvalReport("classification")
            rep.add("accuracy", acc)
            reports.append(rep)
        if "present_step" in tasks:
            rep = EvalReport("present_step")
            for s in evaluate_present_step(ckpt.params, data, exp):
                for m, v in s.items():
                    rep.add(m, v)
            reports.append(rep)
        if "multistep" in tasks:
            multi, failed = evaluate_multistep(ckpt.params, data, exp)
            if failed is not None:
                raise CommandError("nonfinite_rollout", f"rollout diverged at step {failed}")
            for k, scores in sorted(multi.items()):
                rep = EvalReport(f"multistep({k})")
                for s in scores:
                    for m, v in s.items():
                        rep.add(m, v)
                reports.append(rep)
        write_report(os.path.join(out, "report.csv"), reports,
                     f"model={ckpt.kind} fold={data.fold}\n{REPORT_COMMENT}")
    else:
        exp = cfg.experiment()
        kinds = ("dffw", "ffw") if args.both else (cfg["kind"],)
        folds = cfg["cv.folds"] or None
        results = run_cv(trajs, exp, kinds, folds, threads=args.threads or cfg["threads"])
        for kind, res in results.items():
            reports = [r for r in cv_reports(res) if _task_selected(r.task, tasks)]
            suffix = "" if len(kinds) == 1 else f"_{kind}"
            write_report(os.path.join(out, f"report{suffix}.csv"), reports,
                         f"model={kind} cross-validation folds={len(res)}\n{REPORT_COMMENT}")
        horizons = sorted(set(exp.horizons))
        _write_rows(os.path.join(out, "folds.csv"),
                    ["model", "fold", "accuracy", "present_nrmse", "present_pcc"]
                    + [f"multistep{k}_nrmse" for k in horizons] + ["rollout_failed_step"],
                    _fold_rows(results))
    _echo_config(cfg, out)
    print(f"wrote evaluation report to {out}")


def _task_selected(task: str, tasks) -> bool:
    return task.split("(")[0] in tasks


def cmd_classify(cfg: RunConfig, args) -> None:
    ckpt = _load_ckpt(args.checkpoint)
    exp = _experiment_for(ckpt, cfg)
    trajs = _load_dataset(args.data or cfg["data.dir"])
    out = _ensure_out(args.out)
    samples = build_samples(trajs, exp.history)
    data = _checkpoint_fold(ckpt, trajs, samples, cfg)
    rng = np.random.default_rng([exp.eval_seed, data.fold, 0])
    pred, probs = classify(ckpt.params, data.test.present, data.test.hist, exp.gibbs_steps, rng,
                           known_idx=exp.partition.known_idx)
    n_l = probs.shape[1]
    rows = [[int(t), int(f), int(c), int(p), *map(_fmt, pr)]
            for t, f, c, p, pr in zip(data.test.traj_id, data.test.frame, data.test.class_id, pred, probs)]
    _write_rows(os.path.join(out, "classification.csv"),
                ["traj_id", "frame", "true_class", "pred_class"] + [f"p{o}" for o in range(n_l)], rows)
    _echo_config(cfg, out)
    acc = 100.0 * float(np.mean(pred == data.test.class_id))
    print(f"classified {len(pred)} samples, accuracy {acc:.2f}%")


def cmd_predict(cfg: RunConfig, args) -> None:
    ckpt = _load_ckpt(args.checkpoint)
    exp = _experiment_for(ckpt, cfg)
    trajs = _load_dataset(args.data or cfg["data.dir"])
    out = _ensure_out(args.out)
    samples = build_samples(trajs, exp.history)
    data = _checkpoint_fold(ckpt, trajs, samples, cfg)
    steps = args.steps or max(exp.horizons)
    ids = args.traj if args.traj else data.test_ids
    rows_out = []
    feedback = history_feedback(ckpt.norm, exp.partition.known_idx, len(exp.partition.known_idx))
    rng = np.random.default_rng([exp.eval_seed, data.fold, 3])
    norm_all = ckpt.norm.apply(samples)
    for tid in ids:
        idx = np.flatnonzero(norm_all.traj_id == tid)
        if idx.size == 0:
            raise CommandError("unknown_trajectory", f"trajectory {tid} not in dataset")
        start = min(args.start, idx.size - 1)
        pred = predict_multistep(ckpt.params, norm_all.hist[idx[start]], None, steps, exp.partition,
                                 rng, exp.gibbs_steps, feedback)
        raw = ckpt.norm.present_to_raw(pred)
        frame0 = int(norm_all.frame[idx[start]])
        for k in range(steps):
            rows_out.append([int(tid), frame0, k + 1, *map(_fmt, raw[k])])
    _write_rows(os.path.join(out, "predictions.csv"),
                ["traj_id", "start_frame", "step", *PRESENT_NAMES[: ckpt.params.dims.n_v]], rows_out)
    _echo_config(cfg, out)
    print(f"wrote {len(rows_out)} predicted frames for {len(ids)} trajectories")


def cmd_sweep(cfg: RunConfig, args) -> None:
    exp = cfg.experiment()
    trajs = _load_dataset(args.data or cfg["data.dir"])
    out = _ensure_out(args.out)
    cells = sweep(trajs, exp, cfg["sweep.hidden"], cfg["sweep.factors"], fold=cfg["sweep.fold"],
                  threads=args.threads or cfg["threads"])
    write_sweep(os.path.join(out, "sweep.csv"), cells)
    failed = write_sweep_errors(os.path.join(out, "sweep_errors.csv"), cells)
    _echo_config(cfg, out)
    print(f"wrote {len(cells)} sweep cells ({failed} failed) to {out}")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "classify": cmd_classify,
    "predict": cmd_predict,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads for folds/sweep cells")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; may be repeated")
    common.add_argument("--data", help="dataset directory (default: data.dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dffw", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate the ball-trajectory dataset")
    sub.add_parser("train", parents=[common], help="train one model on one fold")
    p = sub.add_parser("evaluate", parents=[common], help="cross-validate, or score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--both", action="store_true", help="cross-validate both model kinds")
    p.add_argument("--kind", choices=("dffw", "ffw"))
    p.add_argument("--horizons", help="comma-separated rollout horizons (default 1,50)")
    p.add_argument("--tasks", help="comma-separated subset of classification,present_step,multistep")
    p = sub.add_parser("classify", parents=[common], help="per-sample labels from a checkpoint")
    p.add_argument("--checkpoint")
    p = sub.add_parser("predict", parents=[common], help="autonomous rollouts from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--start", type=int, default=0, help="sample index within each trajectory")
    p.add_argument("--traj", type=int, action="append", help="trajectory id (repeatable)")
    sub.add_parser("sweep", parents=[common], help="hidden/factor energy grid")
    p = sub.choices["train"]
    p.add_argument("--kind", choices=("dffw", "ffw"))
    return parser


def _overrides(args) -> list[str]:
    items = list(args.set)
    for key, attr in (("seed", "seed"), ("out", "out"), ("threads", "threads"), ("kind", "kind"),
                      ("eval.horizons", "horizons"), ("eval.tasks", "tasks")):
        value = getattr(args, attr, None)
        if value is not None:
            items.append(f"{key}={value}")
    return items


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.from_sources(args.config, _overrides(args))
        args.out = cfg["out"]
        COMMANDS[args.command](cfg, args)
    except CommandError as exc:
        return _fail(exc.code, exc)
    except ckpt_mod.CheckpointError as exc:
        return _fail(exc.code, exc)
    except ConfigError as exc:
        return _fail("bad_config", exc)
    except TrajectoryTooShortError as exc:
        return _fail("trajectory_too_short", exc)
    except NonFiniteParameterError as exc:
        return _fail("nonfinite_parameter", exc)
    except OSError as exc:
        return _fail("io_error", exc)
    except ValueError as exc:
        return _fail("invalid_input", exc)
    return 0


def _fail(code: str, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"error code={code} type={type(exc).__name__} message={message}", file=sys.stderr)
    return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
