"""Scalar objectives for the inner (attack) and outer (training) problems.

Notation: the method table writes KL(A, B). Here that is read as KL(B || A)
where B, the second argument, is the fixed reference (no gradient) and A is
the distribution being optimized. ``kl_div(reference, trainee)`` therefore
takes the second table argument first.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import MMARDError, ShapeError
from .tensorcore import Graph, Tensor, forward_value

METHODS = ("sat", "trades", "ard", "iad", "rslad", "mtard", "mmard")

# per-method default trade-off weight when none is given
DEFAULT_ALPHA = {"ard": 1.0, "rslad": 5.0 / 6.0, "mtard": 0.5, "mmard": 1.0}


class MissingBlockError(MMARDError, ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    method: str
    inner_override: Optional[str] = None
    alpha: Optional[float] = None
    beta: float = 1.0
    lam: float = 6.0
    tau: float = 1.0
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.inner_override is not None and self.inner_override not in METHODS:
            raise ValueError(f"unknown inner_override {self.inner_override!r}")
        if self.alpha is None:
            object.__setattr__(self, "alpha", DEFAULT_ALPHA.get(self.method, 1.0))
        for name in ("alpha", "beta", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be > 0")

    @property
    def inner_method(self) -> str:
        return self.inner_override or self.method


@dataclass
class BatchOutputs:
    """Logit blocks for one batch. Teacher blocks are treated as constants."""

    labels: np.ndarray
    s_nat: Optional[Tensor] = None  # S(x)
    s_adv: Optional[Tensor] = None  # S(x')
    t_nat: Optional[Tensor] = None  # T(x)
    t_adv: Optional[Tensor] = None  # T(x'), T_adv(x') for mtard
    t_clean: Optional[Tensor] = None  # T_nat(x), mtard only
    # detached S(x) for the self-referenced KL terms; defaults to s_nat's values
    s_ref: Optional[np.ndarray] = None

    def self_reference(self) -> np.ndarray:
        return _values(self.s_ref if self.s_ref is not None else self.s_nat)

    def graph(self) -> Graph:
        for t in (self.s_adv, self.s_nat, self.t_adv, self.t_nat, self.t_clean):
            if isinstance(t, Tensor) and t.graph is not None:
                return t.graph
        return Graph()


OUTER_BLOCKS = {
    "sat": ("s_adv",),
    "trades": ("s_nat", "s_adv"),
    "ard": ("s_nat", "s_adv", "t_nat"),
    "iad": ("s_nat", "s_adv", "t_nat", "t_adv"),
    "rslad": ("s_nat", "s_adv", "t_nat"),
    "mtard": ("s_nat", "s_adv", "t_clean", "t_adv"),
    "mmard": ("s_nat", "s_adv", "t_nat", "t_adv"),
}

INNER_BLOCKS = {
    "sat": ("s_adv",),
    "trades": ("s_nat", "s_adv"),
    "ard": ("s_adv",),
    "iad": ("s_adv",),
    "rslad": ("s_adv", "t_nat"),
    "mtard": ("s_adv",),
    "mmard": ("s_adv", "t_adv"),
}


def _on_graph(batch: BatchOutputs, g: Graph) -> BatchOutputs:
    # every term must land on one graph; arrays become constants there
    blocks = {k: _attach(g, getattr(batch, k)) for k in _BLOCK_NAMES if getattr(batch, k) is not None}
    return replace(batch, **blocks)


_BLOCK_NAMES = ("s_nat", "s_adv", "t_nat", "t_adv", "t_clean")


def _require(batch: BatchOutputs, method: str, blocks):
    for name in blocks:
        if getattr(batch, name) is None:
            raise MissingBlockError(f"{method}: batch is missing the {name} block")


def _graph_of(*items) -> Graph:
    for t in items:
        if isinstance(t, Tensor) and t.graph is not None:
            return t.graph
    return Graph()


def _attach(g: Graph, t):
    if isinstance(t, Tensor) and t.graph is g:
        return t
    return g.constant(t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64))


def _values(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"expected {n} labels, got {labels.shape[0]}")
    if ((labels < 0) | (labels >= c)).any():
        raise ShapeError(f"labels must lie in [0, {c})")
    return labels


def one_hot(labels, c: int) -> np.ndarray:
    out = np.zeros((len(labels), c))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax(z, tau: float = 1.0) -> np.ndarray:
    return forward_value("softmax_tau", [np.asarray(z, dtype=np.float64)], {"tau": tau})


def log_softmax(z, tau: float = 1.0) -> np.ndarray:
    return forward_value("log_softmax_tau", [np.asarray(z, dtype=np.float64)], {"tau": tau})


# -- basic losses ------------------------------------------------------------


def cross_entropy(logits, labels, tau: float = 1.0) -> Tensor:
    """Batch mean of -log softmax(logits / tau)[label]."""
    g = _graph_of(logits)
    z = _attach(g, logits)
    if z.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [N, C], got {list(z.shape)}")
    n, c = z.shape
    labels = _check_labels(labels, n, c)
    logp = g.apply("log_softmax_tau", [z], {"tau": tau})
    picked = g.sum(g.mul(logp, one_hot(labels, c)), axis=-1)
    return g.scale(g.mean(picked), -1.0)


def kl_rows(reference_logits, trainee_logits, tau: float = 1.0) -> Tensor:
    """Per-example KL(softmax(ref/tau) || softmax(trainee/tau)), shape [N]."""
    if not tau > 0:
        raise ShapeError(f"kl_div: temperature must be > 0, got {tau}")
    ref = _values(reference_logits)
    g = _graph_of(trainee_logits)
    q = _attach(g, trainee_logits)
    if ref.shape != q.shape or ref.ndim != 2:
        raise ShapeError(f"kl_div: shapes {list(ref.shape)} and {list(q.shape)} must match as [N, C]")
    p = softmax(ref, tau)
    log_p = log_softmax(ref, tau)
    entropy_term = (p * log_p).sum(axis=-1)
    log_q = g.apply("log_softmax_tau", [q], {"tau": tau})
    cross = g.sum(g.mul(log_q, p), axis=-1)
    return g.sub(entropy_term, cross)


def kl_div(reference_logits, trainee_logits, tau: float = 1.0, scale_tau2: bool = False) -> Tensor:
    """Batch-mean KL with the reference side held constant.

    ``scale_tau2`` multiplies by tau**2, the usual correction for softened
    distillation targets.
    """
    rows = kl_rows(reference_logits, trainee_logits, tau)
    g = rows.graph
    out = g.mean(rows)
    return g.scale(out, tau * tau) if scale_tau2 else out


def huber(a, b, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty on a - b.

    Written as 0.5*min(|d|, delta)**2 + delta*(|d| - min(|d|, delta)), which
    equals the two-branch definition and stays differentiable in both inputs.
    """
    if not delta > 0:
        raise ShapeError(f"huber: delta must be > 0, got {delta}")
    g = _graph_of(a, b)
    d = g.sub(_attach(g, a), _attach(g, b))
    m = g.apply("abs", [d])
    c = g.apply("clamp", [m], {"hi": float(delta)})
    quad = g.scale(g.apply("square", [c]), 0.5)
    lin = g.scale(g.sub(m, c), delta)
    return g.add(quad, lin)


# -- triangular relation ------------------------------------------------------


def normalized_dot(u, v) -> Tensor:
    """Row-wise cosine of two difference vectors; zero-norm rows give 0."""
    g = _graph_of(u, v)
    eu = g.apply("normalize", [_attach(g, u)])
    ev = g.apply("normalize", [_attach(g, v)])
    return g.sum(g.mul(eu, ev), axis=-1)


def psi_rows(pred_nat, pred_adv, labels) -> Tensor:
    """Cosine of the angle at the one-hot label between the two predictions, per row."""
    g = _graph_of(pred_nat, pred_adv)
    pn, pa = _attach(g, pred_nat), _attach(g, pred_adv)
    if pn.shape != pa.shape or pn.data.ndim != 2:
        raise ShapeError(f"psi: prediction shapes {list(pn.shape)} and {list(pa.shape)} must match")
    labels = _check_labels(labels, pn.shape[0], pn.shape[1])
    y = one_hot(labels, pn.shape[1])
    return normalized_dot(g.sub(pn, y), g.sub(pa, y))


def psi(pred_nat, pred_adv, label: int) -> Tensor:
    """Single-example form of :func:`psi_rows` over [C] probability vectors."""
    pn, pa = _values(pred_nat), _values(pred_adv)
    for p in (pn, pa):
        if p.ndim != 1 or abs(p.sum() - 1.0) > 1e-9:
            raise ShapeError("psi: inputs must be probability vectors summing to 1")
    g = _graph_of(pred_nat, pred_adv)
    rows = psi_rows(_row(g, pred_nat), _row(g, pred_adv), [int(label)])
    return g.sum(rows)


def _row(g: Graph, t):
    # [C] -> [1, C] by broadcasting, keeping the gradient path when t lives on g
    t = _attach(g, t)
    return g.mul(t, np.ones((1, t.shape[0])))


def trd_loss(batch: BatchOutputs, delta: float = 1.0) -> Tensor:
    """Mean Huber discrepancy between teacher and student triangular relations.

    Predictions are softmax probabilities at temperature 1. The teacher side is
    a constant; the student side carries gradient through S(x) and S(x').
    """
    _require(batch, "trd", ("s_nat", "s_adv", "t_nat", "t_adv"))
    labels = batch.labels
    pt_nat, pt_adv = softmax(_values(batch.t_nat)), softmax(_values(batch.t_adv))
    psi_t = psi_rows(pt_nat, pt_adv, labels).data
    g = _graph_of(batch.s_adv, batch.s_nat)
    ps_nat = g.apply("softmax_tau", [_attach(g, batch.s_nat)], {"tau": 1.0})
    ps_adv = g.apply("softmax_tau", [_attach(g, batch.s_adv)], {"tau": 1.0})
    psi_s = psi_rows(ps_nat, ps_adv, labels)
    return g.mean(huber(psi_t, psi_s, delta))


# -- method dispatch -----------------------------------------------------------


def outer_loss(spec: MethodSpec, batch: BatchOutputs) -> Tensor:
    """Outer-minimization loss for ``spec.method``."""
    m = spec.method
    _require(batch, m, OUTER_BLOCKS[m])
    y, a, tau = batch.labels, spec.alpha, spec.tau
    g = batch.graph()
    batch = _on_graph(batch, g)
    s_nat = _attach(g, batch.s_nat) if batch.s_nat is not None else None
    s_adv = _attach(g, batch.s_adv)
    if m == "sat":
        return cross_entropy(s_adv, y)
    if m == "trades":
        kl = kl_div(batch.self_reference(), s_adv)
        return g.add(cross_entropy(s_nat, y), g.scale(kl, spec.lam))
    if m == "ard":
        ce = cross_entropy(s_nat, y, tau=tau)
        kl = kl_div(batch.t_nat, s_adv, tau=tau, scale_tau2=True)
        return g.add(g.scale(ce, 1.0 - a), g.scale(kl, a))
    if m == "iad":
        w = softmax(_values(batch.t_adv))[np.arange(len(y)), np.asarray(y)] ** spec.beta
        teach = kl_rows(batch.t_nat, s_adv, tau)
        own = kl_rows(batch.self_reference(), s_adv, tau)
        return g.mean(g.add(g.mul(teach, w), g.mul(own, 1.0 - w)))
    if m == "rslad":
        nat = kl_div(batch.t_nat, s_nat)
        adv = kl_div(batch.t_nat, s_adv)
        return g.add(g.scale(nat, 1.0 - a), g.scale(adv, a))
    if m == "mtard":
        nat = kl_div(batch.t_clean, s_nat)
        adv = kl_div(batch.t_adv, s_adv)
        return g.add(g.scale(nat, a), g.scale(adv, 1.0 - a))
    # mmard
    ard_term = kl_div(batch.t_adv, s_adv)
    if a == 0:
        return ard_term
    return g.add(ard_term, g.scale(trd_loss(batch, spec.huber_delta), a))


def inner_objective(spec: MethodSpec, batch: BatchOutputs) -> Tensor:
    """Objective the attack maximizes over x' for ``spec.inner_method``.

    Every reference distribution is constant, so the only gradient path runs
    through S(x') (or f(x') for the self-referenced rows).
    """
    m = spec.inner_method
    _require(batch, m, INNER_BLOCKS[m])
    if m in ("sat", "ard", "iad", "mtard"):
        return cross_entropy(batch.s_adv, batch.labels)
    if m == "trades":
        return kl_div(batch.self_reference(), batch.s_adv)
    if m == "rslad":
        return kl_div(batch.t_nat, batch.s_adv)
    return kl_div(batch.t_adv, batch.s_adv)
