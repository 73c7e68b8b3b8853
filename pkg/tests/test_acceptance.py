"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

The lines are collected on the pytest config and printed in the terminal
summary (see conftest.py), so they show up even when output is captured.
"""
import csv
import time
import zlib
from dataclasses import replace

import numpy as np
import pytest

from _cases import ATOL, H, OUTER_WRT, PRIMITIVE_CASES, TOL, inner_case, outer_case, trd_case
from mmard.attacks import AttackModels, AttackSpec, pgd_attack, run_attack
from mmard.cli import main
from mmard.datasets import gen_two_moons, read_dataset, write_dataset
from mmard.evalbench import evaluate
from mmard.losses import METHODS, BatchOutputs, MethodSpec, inner_objective, kl_div, kl_rows, normalized_dot
from mmard.losses import outer_loss, psi_rows, softmax, trd_loss
from mmard.models import build_model, load_checkpoint, mlp, predict_logits, save_checkpoint
from mmard.tensorcore import grad_check
from mmard.trainer import TrainConfig, desk_attacks, natural_milestones, train_teacher

DISTILL_METHODS = ("ard", "iad", "rslad", "mtard", "mmard")
SEEDS = (0, 1, 2)


@pytest.fixture
def log(request):
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(name, ok, detail):
        status = "REPORT" if ok is None else ("PASS" if ok else "FAIL")
        line = f"{name}: {status} ({detail})"
        lines.append(line)
        print(line)
        return ok

    return record


ACCEPTANCE_KEY = pytest.StashKey[list]()


def rng_for(*parts):
    return np.random.default_rng(zlib.crc32("/".join(map(str, parts)).encode()))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- 1. gradient suite ----------------------------------------------------------------------


def test_c1_gradient_suite(log):
    start = time.perf_counter()
    worst = {}
    for kind, builders in PRIMITIVE_CASES.items():
        rng = rng_for("c1", kind)
        worst[f"primitive {kind}"] = max(grad_check(*builders[i % len(builders)](rng), h=H, atol=ATOL)
                                         for i in range(100))
    for method, blocks in OUTER_WRT.items():
        for wrt in blocks:
            rng = rng_for("c1", "outer", method, wrt)
            worst[f"outer {method}/{wrt}"] = max(grad_check(*outer_case(method, wrt, rng), h=H, atol=ATOL)
                                                 for _ in range(100))
    for method in METHODS:
        rng = rng_for("c1", "inner", method)
        worst[f"inner {method}"] = max(grad_check(*inner_case(method, rng), h=H, atol=ATOL) for _ in range(100))
    rng = rng_for("c1", "trd")
    worst["trd"] = max(grad_check(*trd_case(rng), h=H, atol=ATOL) for _ in range(100))
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= TOL and elapsed < 120
    log("C1 gradient suite", ok, f"{len(worst)} families x 100, worst {name} rel err {err:.2e}, {elapsed:.0f}s")
    assert err <= TOL, worst
    assert elapsed < 120


# -- 2. loss identities ------------------------------------------------------------------------


def test_c2_loss_identities(log):
    rng = rng_for("c2")
    checks = {}
    a = rng.normal(0, 3, (1000, 5))
    b = rng.normal(0, 3, (1000, 5))
    checks["KL(p,p)=0"] = np.abs(kl_rows(a, a).data).max() <= 1e-12
    checks["KL>=0"] = kl_rows(a, b).data.min() >= -1e-12

    # difference vectors p - e_y, scaled by arbitrary positive factors
    p = softmax(rng.normal(0, 2, (1000, 4)))
    q = softmax(rng.normal(0, 2, (1000, 4)))
    y = rng.integers(0, 4, 1000)
    rows = psi_rows(p, q, y).data
    checks["psi in [-1,1]"] = bool(((rows >= -1 - 1e-12) & (rows <= 1 + 1e-12)).all())
    e = np.eye(4)[y]
    k1, k2 = rng.uniform(0.01, 100, (1000, 1)), rng.uniform(0.01, 100, (1000, 1))
    scaled = normalized_dot(k1 * (p - e), k2 * (q - e)).data
    checks["psi scale invariant"] = np.abs(scaled - rows).max() <= 1e-12

    t_nat, t_adv = rng.normal(0, 2, (64, 4)), rng.normal(0, 2, (64, 4))
    same = BatchOutputs(y[:64], s_nat=t_nat, s_adv=t_adv, t_nat=t_nat, t_adv=t_adv)
    checks["L_TRD(T,T)=0"] = trd_loss(same).item() == 0.0

    s_nat, s_adv = rng.normal(0, 2, (64, 4)), rng.normal(0, 2, (64, 4))
    batch = BatchOutputs(y[:64], s_nat=s_nat, s_adv=s_adv, t_nat=t_nat, t_adv=t_adv)
    ard_term = kl_div(t_adv, s_adv).item()
    checks["mmard alpha=0 == ARD term"] = outer_loss(MethodSpec("mmard", alpha=0.0), batch).item() == ard_term
    checks["mmard inner == ARD term"] = inner_objective(MethodSpec("mmard"), batch).item() == ard_term

    failed = [k for k, v in checks.items() if not v]
    log("C2 loss identities", not failed, f"{len(checks) - len(failed)}/{len(checks)} hold"
        + (f", failing: {', '.join(failed)}" if failed else ""))
    assert not failed


# -- 3. attack invariants -----------------------------------------------------------------------


def test_c3_attack_invariants(log):
    rng = rng_for("c3")
    objectives = ["ce", "trades_kl", "cw_margin"] + [MethodSpec(m) for m in METHODS]
    bad = {"ball": 0, "clamp": 0, "fgsm==pgd1": 0, "eps0": 0, "params": 0}
    for trial in range(1000):
        c = int(rng.integers(2, 5))
        d = int(rng.integers(1, 4))
        arch = mlp(d, [int(rng.integers(2, 9))], c)
        student = build_model(arch, trial)
        teacher = build_model(arch, trial + 10_000).frozen_copy()
        models = AttackModels(student, teacher, teacher)
        before = (student.checksum(), teacher.checksum())
        x = rng.uniform(0, 1, (int(rng.integers(1, 6)), d))
        y = rng.integers(0, c, x.shape[0])
        eps = float(rng.uniform(0, 0.3))
        family = ("pgd", "fgsm", "cw")[trial % 3]
        objective = objectives[int(rng.integers(len(objectives)))] if family == "pgd" else None
        spec = AttackSpec(family, eps, max(eps / 4, 1e-3), int(rng.integers(1, 6)), float(rng.uniform(0, 0.02)),
                          objective if objective is not None else ("cw_margin" if family == "cw" else "ce"))
        out = run_attack(models, spec, x, y, rng_for("c3", trial)).x_adv
        bad["ball"] += not (np.abs(out - x) <= eps + 1e-12).all()
        bad["clamp"] += not ((out >= 0) & (out <= 1)).all()

        step = max(eps, 1e-3)
        f = run_attack(student, AttackSpec("fgsm", eps, step), x, y).x_adv
        p = run_attack(student, AttackSpec("pgd", eps, step, 1, 0.0), x, y).x_adv
        bad["fgsm==pgd1"] += not np.array_equal(f, p)

        zero = replace(spec, eps=0.0)
        bad["eps0"] += not np.array_equal(run_attack(models, zero, x, y, rng_for("c3z", trial)).x_adv, x)
        bad["params"] += (student.checksum(), teacher.checksum()) != before
    failed = {k: v for k, v in bad.items() if v}
    log("C3 attack invariants", not failed, "1000 trials, " + (
        "no violations" if not failed else ", ".join(f"{k}: {v} violations" for k, v in failed.items())))
    assert not failed


# -- 4. brute-force attack oracle -------------------------------------------------------------------


def ce_rows(model, x, y):
    z = predict_logits(model, x)
    z = z - z.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def test_c4_brute_force_oracle(log):
    start = time.perf_counter()
    tr = gen_two_moons(1024, 0.1, 0, "train")
    te = gen_two_moons(200, 0.1, 0, "test")
    ta, ea = desk_attacks(tr.margin)
    cfg = TrainConfig(mlp(2, [64, 64], 2), tr, te, ta, ea, epochs=20, schedule="step",
                      milestones=natural_milestones(20), seed=0)
    model = train_teacher(cfg).best
    eps = ta.eps
    x, y = te.features, te.labels
    res = pgd_attack(model, AttackSpec("pgd", eps, eps / 4, 20, 0.001, "ce"), x, y, np.random.default_rng(0))
    pgd_val = ce_rows(model, res.x_adv, y)

    offsets = np.linspace(-eps, eps, 41)
    grid = np.stack(np.meshgrid(offsets, offsets, indexing="ij"), -1).reshape(-1, 2)
    best = np.empty(len(x))
    for i in range(len(x)):
        cand = np.clip(x[i] + grid, 0.0, 1.0)
        best[i] = ce_rows(model, cand, np.full(len(cand), y[i])).max()
    frac = float(np.mean(pgd_val >= 0.9 * best))
    elapsed = time.perf_counter() - start
    ok = frac >= 0.9 and elapsed < 180
    log("C4 brute-force oracle", ok, f"PGD-20 within 90% of grid optimum on {frac:.1%} of 200 points, {elapsed:.0f}s")
    assert frac >= 0.9
    assert elapsed < 180


# -- 5. natural collapse ----------------------------------------------------------------------------


def test_c5_natural_collapse(log):
    start = time.perf_counter()
    drops = []
    for seed in SEEDS:
        tr = gen_two_moons(1024, 0.1, seed, "train")
        te = gen_two_moons(1000, 0.1, seed, "test")
        ta, ea = desk_attacks(tr.margin)
        cfg = TrainConfig(mlp(2, [64, 64], 2), tr, te, ta, ea, schedule="step", milestones=natural_milestones(60),
                          seed=seed)
        model = train_teacher(cfg).best
        eps = 0.5 * tr.margin
        attack = AttackSpec("pgd", eps, eps / 4, 20, 0.001, "ce")
        drops.append(evaluate(model, te) - evaluate(model, te, attack, seed=seed))
    drop = float(np.mean(drops))
    elapsed = time.perf_counter() - start
    ok = drop >= 0.30 and elapsed < 300
    log("C5 natural collapse", ok, f"mean drop {100 * drop:.1f} points over 3 seeds "
        f"({', '.join(f'{100 * d:.1f}' for d in drops)}), {elapsed:.0f}s")
    assert drop >= 0.30
    assert elapsed < 300


# -- 6. robust-training benefit ------------------------------------------------------------------------


def desk_seed(root, seed):
    """Full desk pipeline for one seed through the CLI; returns {name: report row}."""
    common = [f"out_dir={root}", f"seed={seed}"]
    cli = lambda *a: main([*a, *common])  # noqa: E731
    assert cli("gen-data") == 0
    assert cli("train-teacher", "mode=trades") == 0
    assert cli("train-teacher", "mode=natural") == 0
    assert cli("train-teacher", "mode=natural", "teacher_hidden=64,64", f"run_dir={root}/student_natural") == 0
    models = {"natural": root / "student_natural/best.ckpt"}
    for m in DISTILL_METHODS:
        assert cli("distill", f"method={m}", f"run_dir={root}/{m}") == 0
        models[m] = root / m / "best.ckpt"
    rows = {}
    for name, path in models.items():
        assert cli("evaluate", f"model={path}", "attacks=clean,pgd_s,pgd_t",
                   f"run_dir={root}/eval_{name}") == 0
        rows[name] = {k: float(v) for k, v in read_rows(root / f"eval_{name}/report.csv")[0].items()
                      if k in ("clean", "pgd_s", "pgd_t")}
    return rows


@pytest.mark.slow
def test_c6_robust_training_benefit(log, tmp_path):
    start = time.perf_counter()
    per_seed = [desk_seed(tmp_path / f"seed{s}", s) for s in SEEDS]
    mean = {name: {col: float(np.mean([r[name][col] for r in per_seed])) for col in ("clean", "pgd_s", "pgd_t")}
            for name in per_seed[0]}
    gaps = {m: mean[m]["pgd_s"] - mean["natural"]["pgd_s"] for m in DISTILL_METHODS}
    ok = all(g >= 0.20 for g in gaps.values())

    # non-binding comparisons
    order = sorted(DISTILL_METHODS, key=lambda m: -mean[m]["pgd_s"])
    saturation = saturation_trend(tmp_path / "seed0")
    elapsed = time.perf_counter() - start
    log("C6 robust-training benefit", ok,
        f"natural PGD-20 {mean['natural']['pgd_s']:.3f}; gaps "
        + ", ".join(f"{m} {100 * g:+.1f}" for m, g in gaps.items()) + f" points, {elapsed:.0f}s")
    log("C6 ordering (non-binding)", None,
        "PGD_S " + " > ".join(f"{m} {mean[m]['pgd_s']:.3f}" for m in order)
        + "; PGD_T " + ", ".join(f"{m} {mean[m]['pgd_t']:.3f}" for m in DISTILL_METHODS))
    log("C6 capacity trend (non-binding)", None, saturation)
    assert ok, gaps


def saturation_trend(root):
    """Capacity ladder on seed 0 through study-saturation; summarized as PGD_T per teacher width."""
    assert main(["study-saturation", f"out_dir={root}", "seed=0", "ladder=16,64,128"]) == 0
    rows = read_rows(root / "study_saturation/report.csv")
    parts = []
    for m in ("ard", "rslad", "mmard"):
        vals = [f"{r['teacher']}={float(r['pgd_t']):.3f}" for r in rows if r["method"] == m and r["teacher"] != "average"]
        parts.append(f"{m}: " + " ".join(vals))
    return "; ".join(parts)


# -- 7. determinism and round-trips -------------------------------------------------------------------


def test_c7_determinism_and_round_trips(log, tmp_path):
    tiny = ["n_train=256", "n_test=200", "epochs=3", "teacher_hidden=16", "student_hidden=8", f"out_dir={tmp_path}"]
    assert main(["gen-data", *tiny]) == 0
    assert main(["train-teacher", *tiny]) == 0
    assert main(["distill", "method=mmard", *tiny]) == 0
    checks = {}
    for i in (1, 2):
        assert main(["distill", "-c", str(tmp_path / "distill/resolved.cfg"), f"run_dir={tmp_path}/rerun{i}"]) == 0
    for f in ("best.ckpt", "last.ckpt", "record.csv"):
        ref = (tmp_path / "distill" / f).read_bytes()
        checks[f"rerun {f}"] = all((tmp_path / f"rerun{i}" / f).read_bytes() == ref for i in (1, 2))

    model = load_checkpoint(tmp_path / "distill/best.ckpt")
    save_checkpoint(model, tmp_path / "copy.ckpt")
    back = load_checkpoint(tmp_path / "copy.ckpt")
    checks["checkpoint round-trip"] = back.checksum() == model.checksum() and back.arch == model.arch
    data = read_dataset(tmp_path / "data/train.mmds")
    write_dataset(data, tmp_path / "copy.mmds")
    again = read_dataset(tmp_path / "copy.mmds")
    checks["dataset round-trip"] = (np.array_equal(again.features, data.features)
                                    and np.array_equal(again.labels, data.labels) and again.meta == data.meta)
    failed = [k for k, v in checks.items() if not v]
    log("C7 determinism and round-trips", not failed, f"{len(checks) - len(failed)}/{len(checks)} identical"
        + (f", failing: {', '.join(failed)}" if failed else ""))
    assert not failed


# -- 8. protocol shape ----------------------------------------------------------------------------------


def test_c8_protocol_shape(log, tmp_path):
    tiny = ["n_train=128", "n_test=100", "epochs=2", "study_epochs=2", "train_steps=3", "eval_steps=3",
            "teacher_hidden=16", "student_hidden=8", f"out_dir={tmp_path}"]
    assert main(["gen-data", *tiny]) == 0
    assert main(["train-teacher", *tiny]) == 0
    checks = {}

    assert main(["study-alpha", "study_attacks=clean,pgd_t", *tiny]) == 0
    alpha_rows = read_rows(tmp_path / "study_alpha/report.csv")
    checks["alpha grid {0,0.5,1,2}"] = [r["method"] for r in alpha_rows] == [
        "mmard(alpha=0)", "mmard(alpha=0.5)", "mmard(alpha=1)", "mmard(alpha=2)"]

    assert main(["study-combination", "outer_methods=ard,mmard", *tiny]) == 0
    comb = {r["method"]: r for r in read_rows(tmp_path / "study_combination/report.csv")}
    checks["combination rows"] = list(comb) == ["ard", "ard/inner=mmard", "ard/delta",
                                                "mmard", "mmard/inner=mmard", "mmard/delta"]
    checks["mmard-on-mmard delta 0"] = all(float(comb["mmard/delta"][c]) == 0.0 for c in ("clean", "fgsm", "pgd_t"))
    checks["delta = override - vanilla"] = all(
        abs(float(comb["ard/delta"][c]) - (float(comb["ard/inner=mmard"][c]) - float(comb["ard"][c]))) < 1e-12
        for c in ("clean", "fgsm", "pgd_t"))

    assert main(["study-saturation", "ladder=8,16", "methods=ard,mmard", *tiny]) == 0
    sat = read_rows(tmp_path / "study_saturation/report.csv")
    ok = True
    for m in ("ard", "mmard"):
        rows = [r for r in sat if r["method"] == m]
        runs, avg = rows[:-1], rows[-1]
        ok &= avg["teacher"] == "average" and len(runs) == 2
        for c in ("clean", "pgd_t"):
            ok &= abs(float(avg[c]) - sum(float(r[c]) for r in runs) / len(runs)) < 1e-12
    checks["saturation averages"] = ok
    failed = [k for k, v in checks.items() if not v]
    log("C8 protocol shape", not failed, f"{len(checks) - len(failed)}/{len(checks)} hold"
        + (f", failing: {', '.join(failed)}" if failed else ""))
    assert not failed
