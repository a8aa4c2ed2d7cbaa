"""``mtard`` command line: pretrain, distill, eval, report.

Exit codes: 0 success, 1 runtime abort, 2 usage/configuration error.
"""

import argparse
import json
import logging
import os
import sys

from . import data, nets, trainer
from .attacks import eval_attacks
from .config import Config
from .exceptions import CheckpointError, ConfigError, DataFormatError, MTARDError
from .metrics import evaluate, read_jsonl
from .report import build_report, record_row

log = logging.getLogger("mtard")

EXIT_OK, EXIT_ABORT, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_datasets(cfg):
    d = cfg["data"]
    subset = d["subset"] or None
    kind = d["kind"]
    if kind == "two-moons":
        train = data.gen_two_moons(d["n_train"], float(d["noise"]), d["data_seed"])
        test = data.gen_two_moons(d["n_test"], float(d["noise"]), d["data_seed"] + 1, split="test")
    elif kind == "blobs":
        train = data.gen_blobs(d["n_train"], d["n_classes"], float(d["spread"]), d["data_seed"])
        test = data.gen_blobs(d["n_test"], d["n_classes"], float(d["spread"]), d["data_seed"] + 1, split="test")
    else:
        def path(key):
            p = cfg.resolve_path(d[key])
            if p and not os.path.exists(p):
                raise ConfigError(f"file not found: {p}", field=f"data.{key}")
            return p
        train_path, test_path = path("train_path"), path("test_path")
        if kind == "idx":
            train = data.load_idx(train_path, path("train_labels_path"), d["n_classes"], "train", subset)
            test = (data.load_idx(test_path, path("test_labels_path"), d["n_classes"], "test", subset)
                    if test_path else None)
        elif kind == "cifar":
            train = data.load_cifar_binary(train_path, d["n_classes"], "train", subset)
            test = data.load_cifar_binary(test_path, d["n_classes"], "test", subset) if test_path else None
        else:
            train = data.load_dataset(train_path)
            test = data.load_dataset(test_path) if test_path else None
        if test is None:
            test = train
    return train.subset(subset), test.subset(subset)


def network_spec(cfg, ds, role):
    m = cfg["model"]
    teacher = role != "student"
    if m["arch"] == "mlp":
        hidden = m["teacher_hidden"] if teacher else m["student_hidden"]
        return nets.mlp_spec(ds.n_features, hidden, ds.n_classes)
    if ds.image_shape is None:
        raise ConfigError("conv networks need image data", field="model.arch")
    channels = m["teacher_channels"] if teacher else m["student_channels"]
    return nets.conv_spec(ds.image_shape, channels, ds.n_classes, m["kernel"])


def write_manifest(cfg, out, mode, artifacts):
    manifest = {
        "config": cfg.to_string(),
        "config_hash": cfg.digest(),
        "seed": cfg["run"]["seed"],
        "mode": mode,
        "artifacts": {k: os.path.relpath(v, out) for k, v in artifacts.items()},
    }
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _load_config(args):
    cfg = Config.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.set("run", "seed", args.seed)
    if getattr(args, "out", None):
        cfg.set("run", "out", args.out)
    if getattr(args, "mode", None):
        cfg.set("run", "mode", args.mode)
    if getattr(args, "subset", None) is not None:
        cfg.set("data", "subset", args.subset)
    cfg.validate()
    return cfg


def cmd_pretrain(args):
    cfg = _load_config(args)
    mode = cfg["run"]["mode"]
    if mode not in ("natural", "sat"):
        raise ConfigError("pretrain needs mode natural or sat", field="run.mode")
    train, test = load_datasets(cfg)
    tcfg = cfg.train_config()
    role = "clean-teacher" if mode == "natural" else "robust-teacher"
    spec = network_spec(cfg, train, role)
    losses = []
    fit = trainer.train_natural if mode == "natural" else trainer.train_sat
    params = fit(spec, train, tcfg, losses=losses)
    out = cfg["run"]["out"]
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, f"{mode}_teacher.ckpt")
    nets.save_checkpoint(params, ckpt)
    rec = evaluate(params, test.features, test.labels, cfg.eval_suite(), epoch=tcfg.epochs,
                   select=cfg["eval"]["select"], pi_nat=tcfg.pi_nat, pi_adv=tcfg.pi_adv, seed=tcfg.seed,
                   controller={"train_ce": losses[-1] if losses else None})
    metrics_path = os.path.join(out, f"{mode}_teacher_metrics.jsonl")
    with open(metrics_path, "w") as f:
        f.write(rec.to_json() + "\n")
    write_manifest(cfg, out, mode, {"checkpoint": ckpt, "metrics": metrics_path})
    print(rec.to_json())
    return EXIT_OK


def _load_teacher(cfg, key, role):
    path = cfg.resolve_path(cfg["teachers"][key])
    if not path:
        raise ConfigError("teacher checkpoint path is required", field=f"teachers.{key}")
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}", field=f"teachers.{key}")
    return nets.load_checkpoint(path, role=role)


def cmd_distill(args):
    cfg = _load_config(args)
    mode = cfg["run"]["mode"]
    if mode not in trainer.DISTILL_MODES:
        raise ConfigError(f"distill needs one of {trainer.DISTILL_MODES}", field="run.mode")
    clean = _load_teacher(cfg, "clean", "clean-teacher")
    robust = _load_teacher(cfg, "robust", "robust-teacher")
    train, test = load_datasets(cfg)
    tcfg = cfg.train_config()
    spec = network_spec(cfg, train, "student")
    out = cfg["run"]["out"]
    os.makedirs(out, exist_ok=True)
    paths = {
        "metrics": os.path.join(out, "metrics.jsonl"),
        "final": os.path.join(out, "student_final.ckpt"),
        "best": os.path.join(out, "student_best.ckpt"),
        "state_params": os.path.join(out, "run_state.ckpt"),
        "state": os.path.join(out, "run_state.json"),
    }
    resume = None
    if args.resume:
        if not os.path.exists(paths["state"]):
            raise UsageError(f"no run state to resume in {out}")
        params = nets.load_checkpoint(paths["state_params"], spec=spec)
        with open(paths["state"]) as f:
            resume = trainer.RunState.from_json(f.read(), params)
        with open(paths["metrics"], "w") as f:
            for rec in resume.history:
                f.write(rec.to_json() + "\n")
    else:
        open(paths["metrics"], "w").close()

    def on_epoch(record, state):
        with open(paths["metrics"], "a") as f:
            f.write(record.to_json() + "\n")
        nets.save_checkpoint(state.params, paths["state_params"])
        with open(paths["state"], "w") as f:
            f.write(state.to_json())

    result = trainer.distill_mtard(spec, clean, robust, train, tcfg, eval_dataset=test, resume=resume,
                                   until_epoch=args.until_epoch, on_epoch=on_epoch)
    nets.save_checkpoint(result.params, paths["final"])
    nets.save_checkpoint(result.best_params, paths["best"])
    write_manifest(cfg, out, mode, paths)
    if result.history:
        best = result.history[result.best_epoch]
        print(json.dumps({"best_epoch": result.best_epoch, "clean_acc": best.clean_acc,
                          "robust_acc": best.robust_acc, "w_robust": best.w_robust}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    if args.epsilon is not None:
        cfg.set("eval", "epsilon", args.epsilon)
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = nets.load_checkpoint(args.checkpoint)
    _, test = load_datasets(cfg)
    suite = cfg.eval_suite()
    if args.attack:
        names = [a.strip() for a in args.attack.split(",")]
        full = dict(eval_attacks(float(cfg["eval"]["epsilon"])), **suite)
        unknown = [n for n in names if n not in full]
        if unknown:
            raise UsageError(f"unknown attack(s): {unknown}")
        suite = {n: full[n] for n in names}
    select = cfg["eval"]["select"] if cfg["eval"]["select"] in suite else next(iter(suite))
    tcfg = cfg.train_config()
    rec = evaluate(params, test.features, test.labels, suite, select=select,
                   pi_nat=tcfg.pi_nat, pi_adv=tcfg.pi_adv, seed=tcfg.seed)
    print(rec.to_json())
    row = record_row(rec)
    row.update({f"robust_{k}": v for k, v in rec.robust_acc.items()})
    print(",".join(row.keys()))
    print(",".join(repr(v) for v in row.values()))
    return EXIT_OK


def cmd_report(args):
    runs = {}
    for p in args.metrics:
        if not os.path.exists(p):
            raise UsageError(f"metrics file not found: {p}")
        label = os.path.basename(os.path.dirname(os.path.abspath(p))) or os.path.splitext(os.path.basename(p))[0]
        while label in runs:
            label += "_"
        history = read_jsonl(p)
        if not history:
            raise UsageError(f"metrics file is empty: {p}")
        runs[label] = history
    for path in build_report(runs, args.out):
        print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mtard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--subset", type=int, help="cap on dataset size")
        if mode:
            p.add_argument("--mode", choices=trainer.MODES)

    p = sub.add_parser("pretrain", help="train a clean (natural) or robust (sat) teacher")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="distill a student from two teachers")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from run_state in the output dir")
    p.add_argument("--until-epoch", type=int, help="stop at this epoch boundary")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="clean/robust/weighted-robust accuracy of a checkpoint")
    common(p, mode=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", help="comma-separated attack names (default: eval.suite)")
    p.add_argument("--epsilon", help="override eval.epsilon, e.g. 8/255")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="CSV tables and SVG curves from metrics JSONL files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, DataFormatError) as e:
        print(f"mtard {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MTARDError as e:
        print(f"mtard {args.command}: aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
