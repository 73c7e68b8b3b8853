"""Accuracy under attack, study grids (teacher capacity, inner combination, alpha) and reports."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .attacks import AttackSpec, run_attack
from .datasets import DatasetBundle, read_dataset
from .errors import MMARDError, ShapeError
from .losses import MethodSpec
from .models import Model, predict_logits

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "teacher", "student", "seed", "clean", "fgsm", "pgd_s", "pgd_t", "cw")
ATTACK_COLUMNS = ("fgsm", "pgd_s", "pgd_t", "cw")
DEFAULT_ALPHAS = (0.0, 0.5, 1.0, 2.0)


class StudyError(MMARDError, RuntimeError):
    pass


def evaluate(model: Model, dataset: DatasetBundle, attack: Optional[AttackSpec] = None, seed: int = 0,
             batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions (lowest index wins ties), on x_adv if attacked."""
    if dataset.input_shape != model.arch.input_shape:
        raise ShapeError(
            f"dataset shape {list(dataset.input_shape)} does not match model input {list(model.arch.input_shape)}"
        )
    correct = 0
    n = len(dataset)
    for b, start in enumerate(range(0, n, batch_size)):
        x = dataset.features[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        if attack is not None:
            rng = np.random.default_rng([int(seed), b, 2])
            x = run_attack(model, attack, x, y, rng).x_adv
        pred = np.argmax(predict_logits(model, x), axis=1)
        correct += int((pred == y).sum())
    return correct / n


def attack_battery(eps: float, steps: int = 20, random_start: float = 0.001, step: Optional[float] = None) -> dict:
    """FGSM, PGD_S (CE), PGD_T (TRADES KL) and CW-inf at one radius."""
    step = eps / 4.0 if step is None else step
    step = step if step > 0 else 1e-3
    return {
        "fgsm": AttackSpec("fgsm", eps, eps if eps > 0 else 1e-3, 1, 0.0, "ce"),
        "pgd_s": AttackSpec("pgd", eps, step, steps, random_start, "ce"),
        "pgd_t": AttackSpec("pgd", eps, step, steps, random_start, "trades_kl"),
        "cw": AttackSpec("cw", eps, step, steps, random_start, "cw_margin"),
    }


@dataclass
class ReportRow:
    method: str
    teacher: str
    student: str
    seed: int
    clean: Optional[float] = None
    fgsm: Optional[float] = None
    pgd_s: Optional[float] = None
    pgd_t: Optional[float] = None
    cw: Optional[float] = None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    attack_settings: dict = field(default_factory=dict)
    dataset_meta: dict = field(default_factory=dict)

    def find(self, method: str, teacher: Optional[str] = None) -> ReportRow:
        for r in self.rows:
            if r.method == method and (teacher is None or r.teacher == teacher):
                return r
        raise KeyError((method, teacher))


def score_row(model: Model, dataset: DatasetBundle, battery: dict, columns: Sequence[str], seed: int,
              **labels) -> ReportRow:
    row = ReportRow(seed=seed, **labels)
    if "clean" in columns:
        row.clean = evaluate(model, dataset)
    for name in ATTACK_COLUMNS:
        if name in columns:
            setattr(row, name, evaluate(model, dataset, battery[name], seed=seed))
    return row


def _settings(battery: dict) -> dict:
    out = {}
    for name, spec in battery.items():
        d = asdict(spec)
        d["objective"] = spec.objective if isinstance(spec.objective, str) else spec.objective.method
        out[name] = d
    return out


def _tag_of(teacher) -> str:
    if isinstance(teacher, Model):
        return "capacity-" + "-".join(str(w) for w in teacher.arch.hidden or teacher.arch.channels)
    return Path(teacher).parent.name or Path(teacher).stem


def _test_data(config) -> DatasetBundle:
    d = config.test_data
    return d if isinstance(d, DatasetBundle) else read_dataset(d)


def _run(config, spec: MethodSpec, teacher, label: str, out_dir=None):
    from . import trainer

    cfg = replace(config, method=spec, teacher=teacher, out_dir=out_dir)
    try:
        return trainer.distill(cfg).best
    except MMARDError as exc:
        raise StudyError(f"run {label} failed: {exc}") from exc


def _spec(m) -> MethodSpec:
    return m if isinstance(m, MethodSpec) else MethodSpec(m)


def _student_tag(config) -> str:
    a = config.student_arch
    return f"{a.family}-" + "-".join(str(w) for w in (a.hidden or a.channels))


def _subdir(root, *parts):
    return None if root is None else Path(root).joinpath(*parts)


def saturation_study(teachers: Sequence, methods: Sequence, config, battery: dict,
                     columns: Sequence[str] = ("clean", "pgd_t"), out_dir=None,
                     teacher_tags: Optional[Sequence[str]] = None) -> EvalReport:
    """Distill every method from every teacher (smallest capacity first) plus per-method averages."""
    if len(teachers) < 2:
        raise StudyError("saturation study needs at least two teachers")
    tags = list(teacher_tags) if teacher_tags is not None else [_tag_of(t) for t in teachers]
    test = _test_data(config)
    report = EvalReport(attack_settings=_settings(battery), dataset_meta=dict(test.meta))
    for m in methods:
        spec = _spec(m)
        rows = []
        for i, (teacher, tag) in enumerate(zip(teachers, tags)):
            label = f"(method={spec.method}, teacher={tag})"
            model = _run(config, spec, teacher, label, _subdir(out_dir, f"{spec.method}_t{i}"))
            rows.append(score_row(model, test, battery, columns, config.seed, method=spec.method,
                                  teacher=tag, student=_student_tag(config)))
        report.rows += rows
        avg = ReportRow(spec.method, "average", _student_tag(config), config.seed)
        for col in ("clean",) + ATTACK_COLUMNS:
            vals = [getattr(r, col) for r in rows]
            if all(v is not None for v in vals):
                setattr(avg, col, float(np.mean(vals)))
        report.rows.append(avg)
    return report


def combination_study(outer_methods: Sequence, config, battery: dict, teacher, inner: str = "mmard",
                      columns: Sequence[str] = ("clean", "fgsm", "pgd_t"), out_dir=None) -> EvalReport:
    """Each outer method vanilla vs. with its inner objective replaced, plus the difference row."""
    test = _test_data(config)
    report = EvalReport(attack_settings=_settings(battery), dataset_meta=dict(test.meta))
    tag = _tag_of(teacher)
    student = _student_tag(config)
    for m in outer_methods:
        spec = _spec(m)
        vanilla = _run(config, spec, teacher, f"(method={spec.method}, vanilla)",
                       _subdir(out_dir, f"{spec.method}_vanilla"))
        override_spec = replace(spec, inner_override=inner)
        override = _run(config, override_spec, teacher, f"(method={spec.method}, inner={inner})",
                        _subdir(out_dir, f"{spec.method}_inner_{inner}"))
        r0 = score_row(vanilla, test, battery, columns, config.seed, method=spec.method, teacher=tag, student=student)
        r1 = score_row(override, test, battery, columns, config.seed, method=f"{spec.method}/inner={inner}",
                       teacher=tag, student=student)
        delta = ReportRow(f"{spec.method}/delta", tag, student, config.seed)
        for col in ("clean",) + ATTACK_COLUMNS:
            a, b = getattr(r0, col), getattr(r1, col)
            if a is not None and b is not None:
                setattr(delta, col, b - a)
        report.rows += [r0, r1, delta]
    return report


def alpha_sweep(alphas: Sequence[float], config, battery: dict, teacher,
                columns: Sequence[str] = ("clean",) + ATTACK_COLUMNS, out_dir=None,
                base: Optional[MethodSpec] = None) -> EvalReport:
    """One MMARD distillation per trade-off weight, scored on the full attack battery."""
    alphas = list(alphas)
    if not alphas:
        raise StudyError("alpha sweep needs at least one value")
    if any(a < 0 for a in alphas):
        raise StudyError("alpha values must be >= 0")
    base = base or MethodSpec("mmard")
    test = _test_data(config)
    report = EvalReport(attack_settings=_settings(battery), dataset_meta=dict(test.meta))
    for a in alphas:
        spec = replace(base, method="mmard", alpha=float(a))
        model = _run(config, spec, teacher, f"(method=mmard, alpha={a:g})", _subdir(out_dir, f"alpha_{a:g}"))
        report.rows.append(score_row(model, test, battery, columns, config.seed, method=f"mmard(alpha={a:g})",
                                     teacher=_tag_of(teacher), student=_student_tag(config)))
    return report


# -- output ---------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([_cell(getattr(r, c)) for c in REPORT_COLUMNS])
    meta = {"attack_settings": report.attack_settings, "dataset": report.dataset_meta,
            "note": "AutoAttack is not evaluated."}
    (out / "report_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out / "report.svg").write_text(render_svg(report))


def read_report(path) -> EvalReport:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            vals = {c: (None if d[c] == "" else float(d[c])) for c in ("clean",) + ATTACK_COLUMNS}
            rows.append(ReportRow(d["method"], d["teacher"], d["student"], int(d["seed"]), **vals))
    report = EvalReport(rows)
    meta_path = path.with_name("report_meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        report.attack_settings, report.dataset_meta = meta["attack_settings"], meta["dataset"]
    return report


def render_svg(report: EvalReport) -> str:
    """Grouped bars: clean and PGD_T accuracy for every row."""
    bar_w, gap, height, top, left = 18, 16, 200, 20, 40
    group_w = 2 * bar_w + gap
    width = left + max(1, len(report.rows)) * group_w + gap
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + top + 60}" '
        f'viewBox="0 0 {width} {height + top + 60}">',
        f'<line x1="{left}" y1="{top + height}" x2="{width}" y2="{top + height}" stroke="black"/>',
        f'<text x="4" y="{top + 4}" font-size="10">1.0</text>',
        f'<text x="4" y="{top + height}" font-size="10">0.0</text>',
    ]
    for i, r in enumerate(report.rows):
        x0 = left + gap + i * group_w
        parts.append(f'<g class="row" data-method={quoteattr(r.method)} data-teacher={quoteattr(r.teacher)}>')
        for j, (col, colour) in enumerate((("clean", "#4c72b0"), ("pgd_t", "#dd8452"))):
            v = getattr(r, col)
            v = 0.0 if v is None else min(max(v, 0.0), 1.0)
            h = v * height
            parts.append(
                f'<rect class="{col}" x="{x0 + j * bar_w}" y="{top + height - h:.3f}" '
                f'width="{bar_w - 2}" height="{h:.3f}" fill="{colour}"/>'
            )
        parts.append(
            f'<text x="{x0}" y="{top + height + 12}" font-size="8">{escape(r.method)}</text>'
        )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

