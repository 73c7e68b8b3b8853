"""Command-line entry point: ``mmard COMMAND [-c FILE] [key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evalbench, trainer
from .attacks import AttackSpec
from .config import Config, parse_config
from .datasets import gen_blob_grid, gen_two_moons, read_dataset, write_dataset
from .errors import ConfigError, MMARDError, NumericError
from .losses import MethodSpec
from .models import ArchSpec, load_checkpoint

log = logging.getLogger("mmard")

COMMANDS = (
    "gen-data",
    "train-teacher",
    "distill",
    "evaluate",
    "study-saturation",
    "study-combination",
    "study-alpha",
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


# -- builders ---------------------------------------------------------------------


def _run_dir(cfg: Config, default: str) -> Path:
    return Path(cfg["run_dir"]) if cfg["run_dir"] else Path(cfg["out_dir"]) / default


def _data(cfg: Config):
    root = Path(cfg["data_dir"])
    return read_dataset(root / "train.mmds"), read_dataset(root / "test.mmds")


def _arch(cfg: Config, data, hidden, channels) -> ArchSpec:
    if cfg["arch"] == "smallcnn":
        return ArchSpec("smallcnn", data.input_shape, data.num_classes, channels=channels)
    return ArchSpec("mlp", data.input_shape, data.num_classes, hidden=hidden)


def _attacks(cfg: Config, data):
    eps = cfg["eps"] if cfg["eps"] is not None else cfg["eps_ratio"] * data.margin
    step = cfg["step"] if cfg["step"] is not None else eps / 4.0
    step = step if step > 0 else 1e-3
    train = AttackSpec("pgd", eps, step, cfg["train_steps"], cfg["random_start"])
    battery = evalbench.attack_battery(eps, cfg["eval_steps"], cfg["random_start"], step)
    return train, battery


def _method(cfg: Config, method=None) -> MethodSpec:
    name = method or cfg["method"]
    if name is None:
        raise ConfigError("missing required key 'method'", key="method")
    try:
        return MethodSpec(
            name,
            inner_override=cfg["inner_override"] or None,
            alpha=cfg["alpha"],
            beta=cfg["beta"],
            lam=cfg["lam"],
            tau=cfg["tau"],
            huber_delta=cfg["huber_delta"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg: Config, train, test, arch: ArchSpec, out_dir, natural: bool = False, **kw):
    train_attack, battery = _attacks(cfg, train)
    schedule = cfg["schedule"]
    if schedule == "auto":
        schedule = "step" if natural else "cosine"
    epochs = kw.pop("epochs", cfg["epochs"])
    milestones = cfg["milestones"] or trainer.natural_milestones(epochs)
    try:
        return trainer.TrainConfig(
            student_arch=arch,
            train_data=train,
            test_data=test,
            train_attack=train_attack,
            eval_attack=battery["pgd_t"],
            epochs=epochs,
            batch_size=cfg["batch_size"],
            lr=cfg["lr"],
            momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"],
            schedule=schedule,
            milestones=milestones,
            seed=cfg["seed"],
            out_dir=out_dir,
            eval_every=cfg["eval_every"],
            **kw,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require_file(path, key: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise trainer.MissingTeacherError(f"{key}: file not found: {p}")
    return p


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: Config) -> Path:
    root = Path(cfg["data_dir"])
    root.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", cfg["n_train"]), ("test", cfg["n_test"])):
        if cfg["dataset"] == "moons":
            bundle = gen_two_moons(n, cfg["noise"], cfg["data_seed"], split)
        else:
            per_class = cfg["per_class"] if split == "train" else max(1, n // cfg["classes"])
            bundle = gen_blob_grid(cfg["classes"], per_class, cfg["spacing"], cfg["noise"], cfg["data_seed"],
                                   split, image=cfg["dataset"] == "blobs_image")
        write_dataset(bundle, root / f"{split}.mmds")
    cfg.write(root / "resolved.cfg")
    return root


def cmd_train_teacher(cfg: Config) -> Path:
    train, test = _data(cfg)
    mode = cfg["mode"]
    out = _run_dir(cfg, f"teacher_{mode}")
    arch = _arch(cfg, train, cfg["teacher_hidden"], cfg["teacher_channels"])
    method = _method(cfg, mode) if mode != "natural" else None
    tc = _train_config(cfg, train, test, arch, out, natural=mode == "natural", mode=mode, method=method)
    cfg.write(out / "resolved.cfg")
    trainer.train_teacher(tc)
    return out


def cmd_distill(cfg: Config) -> Path:
    cfg.require("method")
    spec = _method(cfg)
    teacher = _require_file(cfg["teacher"], "teacher")
    teacher_nat = None
    if "mtard" in (spec.method, spec.inner_method):
        teacher_nat = _require_file(cfg["teacher_nat"], "teacher_nat")
    train, test = _data(cfg)
    out = _run_dir(cfg, "distill")
    arch = _arch(cfg, train, cfg["student_hidden"], cfg["student_channels"])
    tc = _train_config(cfg, train, test, arch, out, method=spec, teacher=teacher, teacher_nat=teacher_nat)
    cfg.write(out / "resolved.cfg")
    trainer.distill(tc)
    return out


def _columns(cfg: Config, key: str = "attacks", default=None):
    cols = cfg[key] or default
    bad = [c for c in cols if c not in ("clean",) + evalbench.ATTACK_COLUMNS]
    if bad:
        raise ConfigError(f"key {key!r}: unknown attack {bad[0]!r}", key=key)
    return cols


def cmd_evaluate(cfg: Config) -> Path:
    model_path = Path(cfg["model"])
    if not model_path.exists():
        raise FileNotFoundError(f"model: file not found: {model_path}")
    model = load_checkpoint(model_path)
    _, test = _data(cfg)
    _, battery = _attacks(cfg, test)
    out = _run_dir(cfg, "eval")
    cfg.write(out / "resolved.cfg")
    row = evalbench.score_row(model, test, battery, _columns(cfg), cfg["seed"],
                              method=cfg["method"] or model_path.parent.name, teacher="-",
                              student=f"{model.arch.family}-" + "-".join(
                                  str(w) for w in (model.arch.hidden or model.arch.channels)))
    report = evalbench.EvalReport([row], evalbench._settings(battery), dict(test.meta))
    evalbench.write_report(report, out)
    return out


def _study_config(cfg: Config, train, test):
    arch = _arch(cfg, train, cfg["student_hidden"], cfg["student_channels"])
    return _train_config(cfg, train, test, arch, None, epochs=cfg["study_epochs"])


def cmd_study_saturation(cfg: Config) -> Path:
    train, test = _data(cfg)
    out = _run_dir(cfg, "study_saturation")
    cfg.write(out / "resolved.cfg")
    base = _study_config(cfg, train, test)
    if cfg["teachers"]:
        teachers = [_require_file(p, "teachers") for p in cfg["teachers"]]
        tags = [Path(p).parent.name or Path(p).stem for p in teachers]
    else:
        teachers, tags = [], []
        for width in cfg["ladder"]:
            arch = replace(base.student_arch, family="mlp", hidden=(width, width), channels=())
            if cfg["arch"] == "smallcnn":
                arch = replace(base.student_arch, channels=(width // 4 or 1, width // 2 or 1))
            tdir = out / "teachers" / f"w{width}"
            tc = replace(base, student_arch=arch, mode="trades", method=_method(cfg, "trades"), out_dir=tdir)
            trainer.train_teacher(tc)
            teachers.append(tdir / "best.ckpt")
            tags.append(f"w{width}")
    _, battery = _attacks(cfg, test)
    methods = [_method(cfg, m) for m in cfg["methods"]]
    report = evalbench.saturation_study(teachers, methods, base, battery, columns=_columns(cfg, "study_attacks", ("clean", "pgd_t")),
                                        out_dir=out / "runs", teacher_tags=tags)
    evalbench.write_report(report, out)
    return out


def cmd_study_combination(cfg: Config) -> Path:
    train, test = _data(cfg)
    teacher = _require_file(cfg["teacher"], "teacher")
    out = _run_dir(cfg, "study_combination")
    cfg.write(out / "resolved.cfg")
    base = _study_config(cfg, train, test)
    _, battery = _attacks(cfg, test)
    methods = [_method(cfg, m) for m in cfg["outer_methods"]]
    if any(m.method == "mtard" for m in methods):
        base = replace(base, teacher_nat=_require_file(cfg["teacher_nat"], "teacher_nat"))
    report = evalbench.combination_study(methods, base, battery, teacher,
                                         columns=_columns(cfg, "study_attacks", ("clean", "fgsm", "pgd_t")), out_dir=out / "runs")
    evalbench.write_report(report, out)
    return out


def cmd_study_alpha(cfg: Config) -> Path:
    train, test = _data(cfg)
    teacher = _require_file(cfg["teacher"], "teacher")
    out = _run_dir(cfg, "study_alpha")
    cfg.write(out / "resolved.cfg")
    base = _study_config(cfg, train, test)
    _, battery = _attacks(cfg, test)
    spec = _method(cfg, "mmard")
    report = evalbench.alpha_sweep(cfg["alphas"], base, battery, teacher, columns=_columns(cfg, "study_attacks", ("clean",) + evalbench.ATTACK_COLUMNS),
                                   out_dir=out / "runs", base=spec)
    evalbench.write_report(report, out)
    return out


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "study-saturation": cmd_study_saturation,
    "study-combination": cmd_study_combination,
    "study-alpha": cmd_study_alpha,
}


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": str(exc), "kind": type(exc).__name__, "code": code}
    key = getattr(exc, "key", None)
    if key is not None:
        payload["key"] = key
    print(json.dumps(payload), file=sys.stderr)
    return code


def dispatch(command: str, cfg: Config) -> int:
    """Run one command; returns the process exit status."""
    if command not in HANDLERS:
        return _fail(EXIT_CONFIG, ConfigError(f"unknown command {command!r}"))
    try:
        HANDLERS[command](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return _fail(EXIT_NUMERIC, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except MMARDError as exc:
        return _fail(EXIT_FAILURE, exc)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmard",
        description="Adversarial robustness distillation laboratory.",
        epilog="commands: " + ", ".join(COMMANDS),
    )
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("-c", "--config", help="config file of 'key = value' lines")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command not in COMMANDS:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_CONFIG, ConfigError(f"unknown command {args.command!r}"))
    try:
        cfg = parse_config(args.config, args.overrides)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    return dispatch(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
