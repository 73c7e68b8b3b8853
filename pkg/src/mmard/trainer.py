"""Teacher training and adversarial robustness distillation loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .attacks import AttackModels, AttackSpec, pgd_attack
from .datasets import DatasetBundle, read_dataset
from .errors import MMARDError, NumericError, ShapeError
from .losses import (
    INNER_BLOCKS,
    OUTER_BLOCKS,
    BatchOutputs,
    MethodSpec,
    cross_entropy,
    inner_objective,
    outer_loss,
)
from .models import ArchSpec, Model, bind_params, build_model, forward_logits, load_checkpoint, predict_logits, save_checkpoint
from .tensorcore import Graph, backward

log = logging.getLogger(__name__)

TEACHER_MODES = ("natural", "sat", "trades")
RECORD_COLUMNS = ("epoch", "lr", "outer_loss", "inner_obj", "clean_acc", "pgdt_acc")


class TrainingError(MMARDError, RuntimeError):
    pass


class MissingTeacherError(TrainingError, FileNotFoundError):
    pass


def desk_attacks(margin: float, eps_ratio: float = 0.25, train_steps: int = 10, eval_steps: int = 20,
                 random_start: float = 0.001):
    """Training and PGD_T evaluation attacks scaled to the data margin.

    Keeps the 8/255 : 2/255 radius-to-step ratio and the 10/20 step counts.
    """
    eps = eps_ratio * margin
    train = AttackSpec("pgd", eps, eps / 4.0, train_steps, random_start)
    pgdt = AttackSpec("pgd", eps, eps / 4.0, eval_steps, random_start, "trades_kl")
    return train, pgdt


@dataclass
class TrainConfig:
    student_arch: ArchSpec
    train_data: Union[DatasetBundle, str, Path]
    test_data: Union[DatasetBundle, str, Path]
    train_attack: AttackSpec
    eval_attack: AttackSpec
    method: Optional[MethodSpec] = None
    mode: str = "natural"  # teacher runs only
    teacher: Optional[Union[str, Path, Model]] = None
    teacher_nat: Optional[Union[str, Path, Model]] = None
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    schedule: str = "cosine"  # or "step"
    milestones: tuple = ()  # epochs at which "step" divides the rate
    lr_factor: float = 0.1
    seed: int = 0
    out_dir: Optional[Union[str, Path]] = None
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochRow:
    epoch: int
    lr: float
    outer_loss: float
    inner_obj: float
    clean_acc: Optional[float]
    pgdt_acc: Optional[float]


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def evaluated(self) -> list:
        return [r for r in self.rows if r.pgdt_acc is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch] + [_fmt(getattr(r, c)) for c in RECORD_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "RunRecord":
        with open(path, newline="") as fh:
            rows = [
                EpochRow(int(d["epoch"]), *(_parse(d[c]) for c in RECORD_COLUMNS[1:]))
                for d in csv.DictReader(fh)
            ]
        rec = cls(rows)
        rec.best_epoch = _argmax_epoch(rec) if rec.evaluated() else None
        return rec


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _parse(s: str):
    return None if s == "" else float(s)


# -- schedule and optimizer ------------------------------------------------------


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def step_lr(epoch: int, lr0: float, milestones: Sequence[int], factor: float = 0.1) -> float:
    return lr0 * factor ** sum(1 for m in milestones if epoch >= m)


def natural_milestones(epochs: int) -> tuple:
    """Rate drops at 75% and 90% of the run (epochs 75 and 90 of 100)."""
    return (round(0.75 * epochs), round(0.9 * epochs))


def sgd_update(params: dict, grads: dict, velocity: dict, lr: float, momentum: float, weight_decay: float):
    """Classical momentum with weight decay folded into the gradient.

    Returns new ``(params, velocity)`` dicts; the inputs are left untouched.
    """
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"sgd_update: shape mismatch for {name!r}")
        g = g + weight_decay * p
        v = momentum * v + g
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


# -- helpers -------------------------------------------------------------------------


def _dataset(d) -> DatasetBundle:
    return d if isinstance(d, DatasetBundle) else read_dataset(d)


def _teacher(src, what: str) -> Model:
    if isinstance(src, Model):
        return src.frozen_copy()
    path = Path(src)
    if not path.exists():
        raise MissingTeacherError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path).frozen_copy()


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "cosine":
        return cosine_lr(epoch, config.epochs, config.lr)
    return step_lr(epoch, config.lr, config.milestones, config.lr_factor)


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), epoch, batch, 1])


def _argmax_epoch(record: RunRecord) -> int:
    best = None
    for row in record.evaluated():
        if best is None or row.pgdt_acc > best.pgdt_acc:
            best = row
    return best.epoch


def make_adversarial(student: Model, teachers: AttackModels, spec: Optional[MethodSpec], attack: AttackSpec,
                     x: np.ndarray, y: np.ndarray, rng) -> np.ndarray:
    """x' for one batch: PGD on the method's inner objective (plain CE without a method)."""
    objective = spec if spec is not None else "ce"
    models = AttackModels(student, teachers.teacher, teachers.teacher_nat)
    return pgd_attack(models, replace(attack, objective=objective), x, y, rng).x_adv


def batch_outputs(student: Model, teachers: AttackModels, spec: MethodSpec, x, x_adv, y, g: Graph) -> BatchOutputs:
    """Record S(x), S(x') on ``g`` and evaluate the frozen teachers as constants."""
    need = set(OUTER_BLOCKS[spec.method]) | set(INNER_BLOCKS[spec.inner_method])
    out = BatchOutputs(y)
    if "s_nat" in need:
        out.s_nat = forward_logits(student, x, g)
    out.s_adv = forward_logits(student, x_adv, g)
    if "t_nat" in need:
        out.t_nat = predict_logits(teachers.teacher, x)
    if "t_adv" in need:
        out.t_adv = predict_logits(teachers.teacher, x_adv)
    if "t_clean" in need:
        out.t_clean = predict_logits(teachers.teacher_nat, x)
    return out


def _fit(student: Model, teachers: AttackModels, config: TrainConfig, spec: Optional[MethodSpec]):
    from .evalbench import evaluate

    train, test = _dataset(config.train_data), _dataset(config.test_data)
    for name, data in (("train", train), ("test", test)):
        if data.input_shape != student.arch.input_shape:
            raise ShapeError(
                f"{name} data shape {list(data.input_shape)} does not match student input "
                f"{list(student.arch.input_shape)}"
            )
    for t in (teachers.teacher, teachers.teacher_nat):
        if t is not None and t.arch.input_shape != student.arch.input_shape:
            raise ShapeError("teacher input shape does not match the student")
    params = {k: v.copy() for k, v in student.params.items()}
    velocity: dict = {}
    record = RunRecord()
    snapshots = {}
    n = len(train)
    for epoch in range(config.epochs):
        lr = _lr_at(config, epoch)
        order = np.random.default_rng([int(config.seed), epoch, 0]).permutation(n)
        losses, inner_vals = [], []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb, yb = train.features[idx], train.labels[idx]
            model = Model(student.arch, params)
            try:
                g = Graph()
                if spec is None:
                    loss = cross_entropy(forward_logits(model, xb, g), yb)
                    inner = float("nan")
                else:
                    x_adv = make_adversarial(model, teachers, spec, config.train_attack, xb, yb,
                                             _batch_rng(config.seed, epoch, b))
                    outs = batch_outputs(model, teachers, spec, xb, x_adv, yb, g)
                    loss = outer_loss(spec, outs)
                    inner = inner_objective(spec, outs).item()
                grads = backward(g, loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            leaves = bind_params(model, g)
            params, velocity = sgd_update(
                params, {k: grads[leaves[k]].data for k in params}, velocity, lr,
                config.momentum, config.weight_decay,
            )
            for v in params.values():
                if not np.isfinite(v).all():
                    raise NumericError(f"epoch {epoch} batch {b}: parameters became non-finite")
            losses.append(loss.item())
            inner_vals.append(inner)
        model = Model(student.arch, params)
        clean = pgdt = None
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            clean = evaluate(model, test)
            pgdt = evaluate(model, test, config.eval_attack, seed=config.seed)
            snapshots[epoch] = {k: v.copy() for k, v in params.items()}
        row = EpochRow(epoch, lr, float(np.mean(losses)), float(np.mean(inner_vals)), clean, pgdt)
        record.rows.append(row)
        log.info("epoch %d lr %.4g loss %.4f clean %s pgdt %s", epoch, lr, row.outer_loss, clean, pgdt)
    record.best_epoch = _argmax_epoch(record)
    last = Model(student.arch, params)
    best = Model(student.arch, snapshots[record.best_epoch])
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        record.write_csv(out / "record.csv")
        save_checkpoint(best, out / "best.ckpt")
        save_checkpoint(last, out / "last.ckpt")
    return best, last, record


@dataclass
class RunResult:
    best: Model
    last: Model
    record: RunRecord


def train_teacher(config: TrainConfig) -> RunResult:
    """Natural, SAT or TRADES training of a model from scratch."""
    if config.mode not in TEACHER_MODES:
        raise TrainingError(f"invalid teacher mode {config.mode!r}; expected one of {', '.join(TEACHER_MODES)}")
    student = build_model(config.student_arch, config.seed)
    spec = None
    if config.mode != "natural":
        base = config.method if config.method is not None and config.method.method == config.mode else None
        spec = base or MethodSpec(config.mode)
    return RunResult(*_fit(student, AttackModels(student), config, spec))


def distill(config: TrainConfig) -> RunResult:
    """Adversarial robustness distillation of a fresh student from frozen teacher(s)."""
    spec = config.method
    if spec is None:
        raise TrainingError("distill needs a method")
    if config.teacher is None:
        raise MissingTeacherError("distill needs a teacher checkpoint")
    teacher = _teacher(config.teacher, "teacher")
    teacher_nat = None
    if spec.method == "mtard" or spec.inner_method == "mtard":
        if config.teacher_nat is None:
            raise MissingTeacherError("mtard needs a clean teacher checkpoint (teacher_nat)")
        teacher_nat = _teacher(config.teacher_nat, "clean teacher")
    student = build_model(config.student_arch, config.seed)
    return RunResult(*_fit(student, AttackModels(student, teacher, teacher_nat), config, spec))


def select_best(run: RunRecord, checkpoints) -> Model:
    """Checkpoint with the highest PGD_T accuracy; earliest epoch wins ties.

    ``checkpoints`` is either a sequence aligned with the evaluated rows or a
    mapping from epoch to model.
    """
    evaluated = run.evaluated()
    if not evaluated:
        raise TrainingError("run record has no evaluated epochs")
    best_i = 0
    for i, row in enumerate(evaluated):
        if row.pgdt_acc > evaluated[best_i].pgdt_acc:
            best_i = i
    if isinstance(checkpoints, dict):
        return checkpoints[evaluated[best_i].epoch]
    return checkpoints[best_i]
