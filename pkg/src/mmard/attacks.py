"""L-infinity attacks: projection, FGSM, PGD with random start, CW margin."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import MMARDError, ShapeError
from .losses import BatchOutputs, MethodSpec, cross_entropy, inner_objective, kl_div, one_hot
from .models import Model, forward_logits, predict_logits
from .tensorcore import Graph, Tensor, backward

EVAL_OBJECTIVES = ("ce", "trades_kl", "cw_margin")
FAMILIES = ("fgsm", "pgd", "cw")


class AttackError(MMARDError, ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    family: str
    eps: float
    step: float
    steps: int = 1
    random_start: float = 0.0
    objective: Union[str, MethodSpec] = "ce"
    lo: float = 0.0
    hi: float = 1.0
    kappa: float = 0.0  # cap on the CW margin

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackError(f"unknown attack family {self.family!r}")
        if self.eps < 0:
            raise AttackError("eps must be >= 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if not self.step > 0:
            raise AttackError("step must be > 0")
        if self.random_start < 0:
            raise AttackError("random_start must be >= 0")
        if not self.lo < self.hi:
            raise AttackError("clamp range needs lo < hi")
        if isinstance(self.objective, str) and self.objective not in EVAL_OBJECTIVES:
            raise AttackError(f"unknown attack objective {self.objective!r}")


@dataclass
class AttackModels:
    """The attacked model plus whatever frozen references its objective needs."""

    attacked: Model
    teacher: Optional[Model] = None  # T / T_adv
    teacher_nat: Optional[Model] = None  # T_nat, mtard only


@dataclass
class AdversarialBatch:
    x: np.ndarray
    x_adv: np.ndarray
    trace: list = field(default_factory=list)


def project_linf(x_cand, x, eps: float, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Clip into the eps-box around x intersected with [lo, hi]."""
    x_cand = np.asarray(x_cand.data if isinstance(x_cand, Tensor) else x_cand, dtype=np.float64)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x_cand.shape != x.shape:
        raise ShapeError(f"project_linf: shapes {list(x_cand.shape)} and {list(x.shape)} differ")
    lower = np.maximum(x - eps, lo)
    upper = np.minimum(x + eps, hi)
    # keeps lower <= upper even if x itself sits outside [lo, hi]
    upper = np.maximum(upper, lower)
    return np.minimum(np.maximum(x_cand, lower), upper)


def _as_models(models) -> AttackModels:
    return models if isinstance(models, AttackModels) else AttackModels(models)


class _Objective:
    """Evaluates one attack objective and its gradient w.r.t. x'."""

    def __init__(self, models: AttackModels, spec: AttackSpec, x: np.ndarray, y: np.ndarray):
        self.models, self.spec, self.y = models, spec, np.asarray(y, dtype=np.int64)
        obj = spec.objective
        self.method = obj if isinstance(obj, MethodSpec) else None
        inner = self.method.inner_method if self.method else None
        needs_teacher = inner in ("rslad", "mmard")
        if needs_teacher and models.teacher is None:
            raise AttackError(f"{inner} inner objective needs a teacher model")
        self.s_nat = predict_logits(models.attacked, x) if obj == "trades_kl" or inner == "trades" else None
        self.t_nat = predict_logits(models.teacher, x) if inner == "rslad" else None

    def value_and_grad(self, x_adv: np.ndarray):
        g = Graph()
        leaf = g.leaf(x_adv)
        logits = forward_logits(self.models.attacked, leaf, g)
        obj = self.spec.objective
        if obj == "ce":
            out = cross_entropy(logits, self.y)
        elif obj == "trades_kl":
            out = kl_div(self.s_nat, logits)
        elif obj == "cw_margin":
            out = self._margin(g, logits)
        else:
            t_adv = None
            if self.method.inner_method == "mmard":
                t_adv = predict_logits(self.models.teacher, x_adv)
            batch = BatchOutputs(self.y, s_nat=self.s_nat, s_adv=logits, t_nat=self.t_nat, t_adv=t_adv)
            out = inner_objective(self.method, batch)
        return out.item(), backward(g, out)[leaf].data

    def _margin(self, g: Graph, logits: Tensor) -> Tensor:
        z = logits.data
        c = z.shape[1]
        own = one_hot(self.y, c)
        others = np.where(own > 0, -np.inf, z)
        best_other = one_hot(np.argmax(others, axis=1), c)
        # max_{j != y} z_j - z_y, the max taken at its current argmax
        margin = g.sum(g.mul(logits, best_other - own), axis=-1)
        capped = g.apply("clamp", [margin], {"hi": self.spec.kappa})
        return g.mean(capped)


def _ascend(models, spec: AttackSpec, x, y, rng, random_start: float) -> AdversarialBatch:
    models = _as_models(models)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    objective = _Objective(models, spec, x, y)
    x_adv = x
    if random_start > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = x + rng.uniform(-random_start, random_start, size=x.shape)
    x_adv = project_linf(x_adv, x, spec.eps, spec.lo, spec.hi)
    trace = []
    for _ in range(spec.steps):
        value, grad = objective.value_and_grad(x_adv)
        trace.append(value)
        x_adv = project_linf(x_adv + spec.step * np.sign(grad), x, spec.eps, spec.lo, spec.hi)
    return AdversarialBatch(x, x_adv, trace)


def pgd_attack(models, spec: AttackSpec, x, y, rng: np.random.Generator | None = None) -> AdversarialBatch:
    """Signed-gradient ascent with projection, from a uniform random start."""
    if spec.family != "pgd":
        raise AttackError(f"pgd_attack called with family {spec.family!r}")
    return _ascend(models, spec, x, y, rng, spec.random_start)


def fgsm_attack(models, spec: AttackSpec, x, y, rng: np.random.Generator | None = None) -> AdversarialBatch:
    if spec.family != "fgsm":
        raise AttackError(f"fgsm_attack called with family {spec.family!r}")
    one_step = AttackSpec("pgd", spec.eps, spec.eps if spec.eps > 0 else 1.0, 1, 0.0,
                          spec.objective, spec.lo, spec.hi, spec.kappa)
    return _ascend(models, one_step, x, y, None, 0.0)


def cw_linf_attack(models, spec: AttackSpec, x, y, rng: np.random.Generator | None = None) -> AdversarialBatch:
    """PGD on the capped logit margin max_{j != y} z_j - z_y."""
    if spec.family != "cw":
        raise AttackError(f"cw_linf_attack called with family {spec.family!r}")
    margin = AttackSpec("pgd", spec.eps, spec.step, spec.steps, spec.random_start,
                        "cw_margin", spec.lo, spec.hi, spec.kappa)
    return _ascend(models, margin, x, y, rng, spec.random_start)


def run_attack(models, spec: AttackSpec, x, y, rng: np.random.Generator | None = None) -> AdversarialBatch:
    return {"pgd": pgd_attack, "fgsm": fgsm_attack, "cw": cw_linf_attack}[spec.family](models, spec, x, y, rng)
