import math
from dataclasses import replace

import numpy as np
import pytest

import mmard.losses as losses
from mmard.attacks import AttackModels, AttackSpec, pgd_attack
from mmard.datasets import gen_blob_grid, gen_two_moons
from mmard.errors import NumericError
from mmard.losses import MethodSpec, outer_loss
from mmard.models import Model, bind_params, build_model, mlp, predict_logits
from mmard.tensorcore import Graph, backward
from mmard.trainer import (
    EpochRow,
    MissingTeacherError,
    RunRecord,
    TrainConfig,
    TrainingError,
    batch_outputs,
    cosine_lr,
    desk_attacks,
    distill,
    make_adversarial,
    natural_milestones,
    select_best,
    sgd_update,
    step_lr,
    train_teacher,
)


@pytest.fixture(scope="module")
def moons():
    tr = gen_two_moons(64, 0.1, 0, "train")
    te = gen_two_moons(48, 0.1, 0, "test")
    return tr, te


def config(data, **kw):
    tr, te = data
    ta, ea = desk_attacks(tr.margin, train_steps=3, eval_steps=3)
    base = dict(student_arch=mlp(2, [8], 2), train_data=tr, test_data=te, train_attack=ta, eval_attack=ea,
                epochs=2, batch_size=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def teacher(moons):
    return train_teacher(config(moons, student_arch=mlp(2, [16], 2), mode="trades", epochs=3)).best


# -- schedule and optimizer ---------------------------------------------------------------


def test_cosine_start():
    assert cosine_lr(0, 60, 0.1) == 0.1


def test_cosine_midpoint():
    assert cosine_lr(30, 60, 0.1) == pytest.approx(0.05, abs=1e-15)


def test_cosine_last_epoch_small_but_positive():
    lr = cosine_lr(999, 1000, 0.1)
    assert 0 < lr < 1e-5


def test_cosine_nonincreasing():
    lrs = [cosine_lr(e, 37, 0.1) for e in range(37)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_rejects_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(60, 60, 0.1)


def test_step_schedule():
    ms = natural_milestones(100)
    assert ms == (75, 90)
    assert step_lr(74, 0.1, ms) == 0.1
    assert step_lr(75, 0.1, ms) == pytest.approx(0.01)
    assert step_lr(95, 0.1, ms) == pytest.approx(0.001)


def test_sgd_plain_step():
    p, v = sgd_update({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, {}, 0.1, 0.0, 0.0)
    np.testing.assert_array_equal(p["w"], [1.0 - 0.05, 2.0 + 0.1])


def test_sgd_fixed_point():
    p, _ = sgd_update({"w": np.array([1.0, 2.0])}, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_sgd_two_momentum_steps():
    g = np.array([1.0, -2.0])
    p0 = {"w": np.zeros(2)}
    p1, v1 = sgd_update(p0, {"w": g}, {}, 0.1, 0.9, 0.0)
    p2, _ = sgd_update(p1, {"w": g}, v1, 0.1, 0.9, 0.0)
    np.testing.assert_allclose(p0["w"] - p2["w"], 0.1 * g * (1 + 1.9), rtol=1e-15)


def test_sgd_weight_decay_folded_into_gradient():
    p, _ = sgd_update({"w": np.array([2.0])}, {"w": np.array([0.0])}, {}, 0.5, 0.0, 0.1)
    np.testing.assert_allclose(p["w"], [2.0 - 0.5 * 0.2])


def test_sgd_leaves_inputs_untouched():
    params = {"w": np.array([1.0])}
    sgd_update(params, {"w": np.array([1.0])}, {}, 0.1, 0.9, 0.0)
    assert params["w"][0] == 1.0


# -- select_best ------------------------------------------------------------------------------


def record(accs):
    return RunRecord([EpochRow(i, 0.1, 0.0, 0.0, 0.5, a) for i, a in enumerate(accs)])


def test_select_best_argmax():
    assert select_best(record([0.5, 0.6, 0.55]), ["e0", "e1", "e2"]) == "e1"


def test_select_best_earliest_tie():
    assert select_best(record([0.6, 0.6]), ["e0", "e1"]) == "e0"


def test_select_best_single():
    assert select_best(record([0.3]), {0: "only"}) == "only"


def test_select_best_without_evaluations():
    with pytest.raises(TrainingError):
        select_best(RunRecord([EpochRow(0, 0.1, 0.0, 0.0, None, None)]), [])


# -- training runs ---------------------------------------------------------------------------------


def test_natural_training_beats_chance():
    tr = gen_blob_grid(4, 16, 1.0, 0.1, 0, "train")
    te = gen_blob_grid(4, 8, 1.0, 0.1, 0, "test")
    ta, ea = desk_attacks(tr.margin, train_steps=2, eval_steps=2)
    cfg = TrainConfig(mlp(2, [16], 4), tr, te, ta, ea, epochs=2, batch_size=16, seed=0)
    model = train_teacher(cfg).last
    acc = (np.argmax(predict_logits(model, tr.features), 1) == tr.labels).mean()
    assert acc > 0.25


def test_sat_with_zero_radius_matches_natural(moons):
    zero = AttackSpec("pgd", 0.0, 1e-3, 3, 0.001)
    nat = train_teacher(config(moons, mode="natural", train_attack=zero))
    sat = train_teacher(config(moons, mode="sat", train_attack=zero))
    assert [r.outer_loss for r in nat.record.rows] == [r.outer_loss for r in sat.record.rows]
    for k in nat.last.params:
        assert np.array_equal(nat.last.params[k], sat.last.params[k])


def test_training_is_deterministic(moons, tmp_path):
    for name in ("a", "b"):
        train_teacher(config(moons, mode="trades", out_dir=tmp_path / name))
    for f in ("best.ckpt", "last.ckpt", "record.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_record_csv_round_trip(moons, tmp_path):
    run = train_teacher(config(moons, mode="natural", out_dir=tmp_path))
    back = RunRecord.read_csv(tmp_path / "record.csv")
    assert [r.outer_loss for r in back.rows] == [r.outer_loss for r in run.record.rows]
    assert [r.pgdt_acc for r in back.rows] == [r.pgdt_acc for r in run.record.rows]
    assert back.best_epoch == run.record.best_epoch


def test_distill_pipeline_contract(moons, teacher, tmp_path):
    run = distill(config(moons, method=MethodSpec("mmard", alpha=1.0), teacher=teacher, out_dir=tmp_path))
    assert len(run.record.rows) == 2
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert all(math.isfinite(r.outer_loss) and math.isfinite(r.inner_obj) for r in run.record.rows)


def test_distill_keeps_teacher_unchanged(moons, teacher):
    before = teacher.checksum()
    distill(config(moons, method=MethodSpec("rslad"), teacher=teacher))
    assert teacher.checksum() == before


def test_best_is_the_selected_snapshot(moons, teacher):
    run = distill(config(moons, method=MethodSpec("ard"), teacher=teacher, epochs=3))
    accs = [r.pgdt_acc for r in run.record.rows]
    assert run.record.best_epoch == accs.index(max(accs))


def test_mmard_alpha_zero_equals_trd_removed(moons, teacher, monkeypatch):
    a0 = distill(config(moons, method=MethodSpec("mmard", alpha=0.0), teacher=teacher))
    monkeypatch.setattr(losses, "trd_loss", lambda batch, delta=1.0: batch.graph().constant(0.0))
    removed = distill(config(moons, method=MethodSpec("mmard", alpha=1.0), teacher=teacher))
    assert [r.outer_loss for r in a0.record.rows] == [r.outer_loss for r in removed.record.rows]
    for k in a0.last.params:
        assert np.array_equal(a0.last.params[k], removed.last.params[k])


def test_mmard_and_rslad_first_batch_traces_differ(moons, teacher):
    tr, _ = moons
    cfg = config(moons)
    student = build_model(cfg.student_arch, 0)
    refs = AttackModels(student, teacher.frozen_copy())
    x, y = tr.features[:32], tr.labels[:32]
    traces = [pgd_attack(refs, replace(cfg.train_attack, objective=MethodSpec(m)), x, y,
                         np.random.default_rng(1)).trace for m in ("mmard", "rslad")]
    assert all(a != b for a, b in zip(*traces))


def test_mmard_and_rslad_first_batch_inputs_differ():
    # sign steps only split when T(x') and T(x) disagree enough to flip a gradient sign,
    # which needs more than two classes and a teacher that is soft inside the ball
    tr = gen_blob_grid(4, 16, 1.0, 0.3, 0, "train")
    student = build_model(mlp(2, [8], 4), 0)
    base = build_model(mlp(2, [16], 4), 5)
    teacher = Model(base.arch, {k: 3 * v for k, v in base.params.items()}).frozen_copy()
    attack = AttackSpec("pgd", 0.2, 0.05, 5, 0.001)
    xs = [make_adversarial(student, AttackModels(student, teacher), MethodSpec(m), attack, tr.features, tr.labels,
                           np.random.default_rng(1)) for m in ("mmard", "rslad")]
    assert not np.array_equal(xs[0], xs[1])


def test_outer_gradient_ignores_attack_construction(moons, teacher):
    tr, _ = moons
    cfg = config(moons)
    student = build_model(cfg.student_arch, 0)
    refs = AttackModels(student, teacher.frozen_copy())
    spec = MethodSpec("mmard")
    x, y = tr.features[:16], tr.labels[:16]
    x_adv = make_adversarial(student, refs, spec, cfg.train_attack, x, y, np.random.default_rng(0))

    def grads(x_prime):
        g = Graph()
        loss = outer_loss(spec, batch_outputs(student, refs, spec, x, x_prime, y, g))
        out = backward(g, loss)
        return {k: out[v].data for k, v in bind_params(student, g).items()}

    # recompute on a copy that has no history at all
    a, b = grads(x_adv), grads(np.array(x_adv, copy=True))
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_distill_without_teacher(moons):
    with pytest.raises(MissingTeacherError):
        distill(config(moons, method=MethodSpec("ard")))


def test_distill_with_missing_teacher_file(moons, tmp_path):
    with pytest.raises(MissingTeacherError, match="nope.ckpt"):
        distill(config(moons, method=MethodSpec("ard"), teacher=tmp_path / "nope.ckpt"))


def test_mtard_needs_clean_teacher(moons, teacher):
    with pytest.raises(MissingTeacherError):
        distill(config(moons, method=MethodSpec("mtard"), teacher=teacher))


def test_mtard_runs_with_both_teachers(moons, teacher):
    run = distill(config(moons, method=MethodSpec("mtard"), teacher=teacher, teacher_nat=teacher, epochs=1))
    assert len(run.record.rows) == 1


def test_divergence_is_reported_with_position(moons):
    with pytest.raises(NumericError, match="epoch 0 batch"):
        train_teacher(config(moons, mode="natural", lr=1e308, momentum=0.0))


def test_invalid_teacher_mode(moons):
    with pytest.raises(TrainingError):
        train_teacher(config(moons, mode="mixup"))


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(momentum=1.0),
                                dict(weight_decay=-1.0), dict(schedule="linear"), dict(eval_every=0)])
def test_invalid_train_configs(moons, kw):
    with pytest.raises(ValueError):
        config(moons, **kw)


def test_eval_every_skips_epochs(moons):
    run = train_teacher(config(moons, mode="natural", epochs=3, eval_every=2))
    assert [r.pgdt_acc is not None for r in run.record.rows] == [False, True, True]


def test_step_schedule_is_used(moons):
    run = train_teacher(config(moons, mode="natural", epochs=4, schedule="step", milestones=(2,)))
    assert [r.lr for r in run.record.rows] == pytest.approx([0.1, 0.1, 0.01, 0.01])
