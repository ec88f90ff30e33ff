"""Command-line interface.

Subcommands: ``train``, ``attack``, ``eval``, ``landscape``,
``transfer``.  Every run resolves its options (flags > config file >
defaults), writes an ``effective-config.txt`` record beside its
outputs, and is bit-reproducible from that record via ``--config``.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate, train as train_mod
from .attacks import AttackConfig, AttackFamily, BLSConfig
from .config import Opt, read_config_file, resolve, write_effective
from .data import Batch, load_dir, subset
from .errors import AdvoptError, ConfigError
from .evaluate import (EvalReport, accuracy, attack_trajectory, loss_landscape,
                       min_across_attacks, parse_attack_tag, robust_accuracy,
                       transfer_eval)
from .learned import load_rnn_params, save_rnn_params
from .models import load_checkpoint, save_checkpoint
from .train import TrainConfig

DATA_ENV = "ADVOPT_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_DATA_OPTS = [
    Opt("data", "str", help=f"data directory with IDX files (or ${DATA_ENV})"),
    Opt("split", "str", "test", help="which split to evaluate (train/test)"),
    Opt("subset", "int", help="evaluate only this many examples (seeded)"),
]

TRAIN_SCHEMA = [
    Opt("data", "str", help=f"data directory with IDX files (or ${DATA_ENV})"),
    Opt("out", "str", required=True, help="output directory"),
    Opt("objective", "str", "plain", help=f"one of {', '.join(train_mod.OBJECTIVES)}"),
    Opt("epochs", "int", 5),
    Opt("batch-size", "int", 64),
    Opt("inner-steps", "int", 10, help="inner maximizer steps per batch"),
    Opt("epsilon", "float", 0.3),
    Opt("step-size", "float", help="inner PGD step size (default epsilon/4)"),
    Opt("alpha1", "float", 0.05, help="learned-optimizer learning rate"),
    Opt("alpha2", "float", 0.05, help="classifier learning rate"),
    Opt("momentum", "float", 0.0, help="classifier momentum"),
    Opt("lambda", "float", 6.0, help="trade-off weight; KL term enters as 1/lambda"),
    Opt("seed", "int", 0),
    Opt("hidden-size", "int", 10),
    Opt("num-classes", "int", 10),
    Opt("subset-train", "int", help="train on this many examples (seeded)"),
    Opt("subset-test", "int", help="validate on this many examples (seeded)"),
    Opt("inner-family", "str", "pgd", help="advtrain inner attack: pgd or pgd-bls"),
    Opt("bls-alpha0", "float", help="line-search initial step (default epsilon)"),
    Opt("bls-rho", "float", 0.5),
    Opt("bls-c", "float", 1e-4),
    Opt("bls-max-backtracks", "int", 10),
]

ATTACK_SCHEMA = [
    Opt("model", "str", required=True, help="classifier checkpoint"),
    *_DATA_OPTS,
    Opt("out", "str", required=True),
    Opt("family", "str", "pgd", help="fgsm, pgd, pgd-bls, cw, learned"),
    Opt("steps", "int", 10),
    Opt("epsilon", "float", 0.3),
    Opt("step-size", "float"),
    Opt("loss", "str", "ce", help="attack objective: ce or kl"),
    Opt("optimizer-ckpt", "str", help="required for --family learned"),
    Opt("traj-batch", "int", 128, help="batch size for the trajectory log"),
    Opt("seed", "int", 0),
    Opt("no-figures", "bool", False),
]

EVAL_SCHEMA = [
    Opt("model", "list", required=True, help="name=checkpoint, repeatable"),
    *_DATA_OPTS,
    Opt("out", "str", required=True),
    Opt("attacks", "str", "pgd10,pgd100,cw100", help="comma-separated tags like pgd10, cw100, learned10"),
    Opt("epsilon", "float", 0.3),
    Opt("optimizer-ckpt", "str", help="required when a learned tag is present"),
    Opt("seed", "int", 0),
    Opt("no-figures", "bool", False),
]

LANDSCAPE_SCHEMA = [
    Opt("model", "str", required=True),
    *_DATA_OPTS,
    Opt("out", "str", required=True),
    Opt("index", "int", 0, help="which example to analyze"),
    Opt("extent", "float", 0.3, help="half-width of the perturbation grid"),
    Opt("resolution", "int", 21),
    Opt("seed", "int", 0),
    Opt("no-figures", "bool", False),
]

TRANSFER_SCHEMA = [
    Opt("surrogate", "str", required=True, help="checkpoint attacks are crafted on"),
    Opt("target", "str", required=True, help="checkpoint being evaluated"),
    *_DATA_OPTS,
    Opt("out", "str", required=True),
    Opt("family", "str", "pgd"),
    Opt("steps", "int", 10),
    Opt("epsilon", "float", 0.3),
    Opt("step-size", "float"),
    Opt("optimizer-ckpt", "str"),
    Opt("seed", "int", 0),
]


def _data_dir(values) -> str:
    d = values.get("data") or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"no data directory: pass --data or set {DATA_ENV}")
    values["data"] = d  # effective record carries the resolved path
    return d


def _load_split(values, seed_salt: int):
    ds = load_dir(_data_dir(values), values.get("split", "test"))
    if values.get("subset"):
        ds = subset(ds, values["subset"], (values["seed"], seed_salt))
    return ds


def _out_dir(values) -> Path:
    out = Path(values["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attack_config(values) -> AttackConfig:
    try:
        family = AttackFamily(values["family"])
    except ValueError:
        raise UsageError(f"unknown attack family {values['family']!r}") from None
    if family == AttackFamily.LEARNED and not values.get("optimizer_ckpt"):
        raise UsageError("--family learned requires --optimizer-ckpt")
    return AttackConfig(epsilon=values["epsilon"], steps=values["steps"], family=family,
                        step_size=values.get("step_size"), loss=values.get("loss", "ce"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(values) -> int:
    if values["objective"] != "plain" and values["inner_steps"] < 1:
        raise UsageError("--inner-steps must be >= 1 for adversarial objectives")
    data_dir = _data_dir(values)
    out = _out_dir(values)
    cfg = TrainConfig(
        objective=values["objective"], epochs=values["epochs"], batch_size=values["batch_size"],
        inner_steps=values["inner_steps"], epsilon=values["epsilon"], step_size=values["step_size"],
        alpha1=values["alpha1"], alpha2=values["alpha2"], momentum=values["momentum"],
        trades_lambda=values["lambda"], seed=values["seed"], hidden_size=values["hidden_size"],
        num_classes=values["num_classes"],
    )
    train_data = load_dir(data_dir, "train")
    if values["subset_train"]:
        train_data = subset(train_data, values["subset_train"], (cfg.seed, 17))
    try:
        val_data = load_dir(data_dir, "test")
        if values["subset_test"]:
            val_data = subset(val_data, values["subset_test"], (cfg.seed, 19))
    except (OSError, AdvoptError):
        val_data = None

    write_effective(out / "effective-config.txt", "train", TRAIN_SCHEMA, values)

    kwargs = {"val_data": val_data, "out_dir": out}
    if cfg.objective == "advtrain":
        inner = AttackConfig(epsilon=cfg.epsilon, steps=cfg.inner_steps,
                             family=AttackFamily(values["inner_family"]),
                             step_size=cfg.inner_alpha)
        bls = BLSConfig(alpha0=values["bls_alpha0"] or cfg.epsilon, rho=values["bls_rho"],
                        c=values["bls_c"], max_backtracks=values["bls_max_backtracks"])
        result = train_mod.train_advtrain(cfg, train_data, inner, bls=bls, **kwargs)
    else:
        result = train_mod.train(cfg, train_data, **kwargs)

    if len(result) == 3:
        weights, params, log = result
        save_rnn_params(params, out / "phi.ckpt")
    else:
        weights, log = result
    save_checkpoint(weights, out / "theta.ckpt")
    last = log.entries[-1] if log.entries else None
    if last and last.nat_acc is not None:
        print(f"trained {cfg.objective}: final loss {last.theta_loss:.4f}, "
              f"natural accuracy {last.nat_acc:.2f}%")
    else:
        print(f"trained {cfg.objective}")
    return 0


def cmd_attack(values) -> int:
    cfg = _attack_config(values)
    weights = load_checkpoint(values["model"])
    params = load_rnn_params(values["optimizer_ckpt"]) if values.get("optimizer_ckpt") else None
    dataset = _load_split(values, 19)
    out = _out_dir(values)
    write_effective(out / "effective-config.txt", "attack", ATTACK_SCHEMA, values)

    acc = robust_accuracy(weights, cfg, dataset, rnn_params=params, seed=values["seed"],
                          bls=BLSConfig(alpha0=cfg.epsilon))
    traj_data = subset(dataset, values["traj_batch"], (values["seed"], 23))
    label, _ = parse_attack_tag(_tag_for(cfg), cfg.epsilon)
    traj = attack_trajectory(weights, [(label, cfg, params)],
                             Batch(traj_data.images, traj_data.labels),
                             cfg.steps, seed=(values["seed"], 29))
    (out / "attack.json").write_text(
        _json({"attack": label, "robust_accuracy": acc, "steps": cfg.steps,
               "epsilon": cfg.epsilon}))
    (out / "trajectory.csv").write_text(traj.to_csv())
    if not values["no_figures"]:
        from . import plots

        plots.trajectory_figure(traj, out / "trajectory.png")
    print(f"{label}: robust accuracy {acc:.2f}%")
    return 0


def _tag_for(cfg: AttackConfig) -> str:
    base = {AttackFamily.FGSM: "fgsm", AttackFamily.PGD: "pgd", AttackFamily.PGD_BLS: "pgd-bls",
            AttackFamily.CW_INF: "cw", AttackFamily.LEARNED: "learned"}[cfg.family]
    return f"{base}{cfg.steps}"


def _json(obj) -> str:
    import json

    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def cmd_eval(values) -> int:
    pairs = []
    for item in values["model"]:
        if "=" not in item:
            raise UsageError(f"--model wants name=path, got {item!r}")
        name, path = item.split("=", 1)
        pairs.append((name, path))
    tags = [t for t in values["attacks"].split(",") if t]
    if not tags:
        raise UsageError("--attacks must name at least one attack")
    parsed = [parse_attack_tag(t, values["epsilon"]) for t in tags]
    needs_learned = any(cfg.family == AttackFamily.LEARNED for _, cfg in parsed)
    if needs_learned and not values.get("optimizer_ckpt"):
        raise UsageError("a learned attack tag requires --optimizer-ckpt")
    params = load_rnn_params(values["optimizer_ckpt"]) if values.get("optimizer_ckpt") else None

    dataset = _load_split(values, 19)
    out = _out_dir(values)
    write_effective(out / "effective-config.txt", "eval", EVAL_SCHEMA, values)

    report = EvalReport()
    for name, path in pairs:
        weights = load_checkpoint(path)
        cells = {}
        for col, cfg in parsed:
            cells[col] = robust_accuracy(
                weights, cfg, dataset, seed=values["seed"],
                rnn_params=params if cfg.family == AttackFamily.LEARNED else None,
                bls=BLSConfig(alpha0=cfg.epsilon))
        report.add_defense(name, accuracy(weights, dataset), cells)
    min_across_attacks(report)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    if not values["no_figures"]:
        from . import plots

        plots.report_figure(report, out / "report.png")
    print(report.to_csv(), end="")
    return 0


def cmd_landscape(values) -> int:
    weights = load_checkpoint(values["model"])
    dataset = _load_split(values, 19)
    idx = values["index"]
    if not (0 <= idx < len(dataset)):
        raise UsageError(f"--index {idx} out of range for {len(dataset)} examples")
    out = _out_dir(values)
    write_effective(out / "effective-config.txt", "landscape", LANDSCAPE_SCHEMA, values)
    grid = loss_landscape(weights, dataset.images[idx], int(dataset.labels[idx]),
                          values["extent"], values["resolution"], seed=values["seed"])
    (out / "landscape.csv").write_text(grid.to_csv())
    if not values["no_figures"]:
        from . import plots

        plots.landscape_figure(grid, out / "landscape.png")
    print(f"landscape: loss range [{grid.z.min():.4f}, {grid.z.max():.4f}]")
    return 0


def cmd_transfer(values) -> int:
    surrogate = load_checkpoint(values["surrogate"])
    target = load_checkpoint(values["target"])
    cfg = AttackConfig(epsilon=values["epsilon"], steps=values["steps"],
                       family=AttackFamily(values["family"]), step_size=values.get("step_size"))
    params = load_rnn_params(values["optimizer_ckpt"]) if values.get("optimizer_ckpt") else None
    if cfg.family == AttackFamily.LEARNED and params is None:
        raise UsageError("--family learned requires --optimizer-ckpt")
    dataset = _load_split(values, 19)
    out = _out_dir(values)
    write_effective(out / "effective-config.txt", "transfer", TRANSFER_SCHEMA, values)
    acc = transfer_eval(surrogate, target, cfg, dataset, seed=values["seed"], rnn_params=params)
    (out / "transfer.json").write_text(
        _json({"transfer_accuracy": acc, "family": values["family"], "steps": cfg.steps,
               "epsilon": cfg.epsilon}))
    print(f"transfer robust accuracy: {acc:.2f}%")
    return 0


COMMANDS = {
    "train": (cmd_train, TRAIN_SCHEMA),
    "attack": (cmd_attack, ATTACK_SCHEMA),
    "eval": (cmd_eval, EVAL_SCHEMA),
    "landscape": (cmd_landscape, LANDSCAPE_SCHEMA),
    "transfer": (cmd_transfer, TRANSFER_SCHEMA),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="advopt", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name, (_, schema) in COMMANDS.items():
        p = sub.add_parser(name, add_help=True)
        p.add_argument("--config", default=None, help="key = value config file")
        for opt in schema:
            flag = f"--{opt.flag}"
            if opt.kind == "bool":
                p.add_argument(flag, dest=opt.dest, action="store_const", const=True,
                               default=None, help=opt.help)
            elif opt.kind == "list":
                p.add_argument(flag, dest=opt.dest, action="append", default=None, help=opt.help)
            elif opt.kind in ("int", "float"):
                p.add_argument(flag, dest=opt.dest, type=int if opt.kind == "int" else float,
                               default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=opt.dest, default=None, help=opt.help)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        handler, schema = COMMANDS[args.command]
        file_values = read_config_file(args.config) if args.config else {}
        values = resolve(args.command, schema, vars(args), file_values)
        return handler(values)
    except (UsageError, ConfigError) as exc:
        print(f"advopt: usage error: {exc}", file=sys.stderr)
        return 1
    except (AdvoptError, OSError) as exc:
        print(f"advopt: error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
