import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from dkm import losses
from dkm.autodiff import Graph, backward, grads_by_name
from dkm.domains import domain_stats, make_pseudo_unseen, sample_episode
from dkm.evaluation import (
    EvalReport,
    ProtocolError,
    build_data,
    calibrate,
    ci_halfwidth,
    evaluate_episode,
    kappa_grid,
    run_ablation,
    run_meta_test,
    sweep_csv,
    sweep_kappa,
)
from dkm.nets import ParamSet, difficulty_score, encode_np, prototype_classifier
from dkm.training import fused_features, pretrain, run_meta_training


@pytest.fixture(scope="module")
def trained(small_cfg):
    data = build_data(small_cfg)
    model, _ = pretrain(small_cfg, data.source, data.heldout, 1)
    model, _ = run_meta_training(model, small_cfg, data.source, data.source_stats, 2)
    return small_cfg, data, model


def target_episode(data, cfg, seed=0, shot=None):
    pc = cfg.protocol
    return sample_episode(data.targets[cfg.benchmark.eval_target], pc.way, shot or pc.shot, pc.query, seed)


def support_log_rho(model, x):
    g = Graph()
    rho = difficulty_score(g, g.bind(model.domain), g.bind(model.mapper), g.constant(encode_np(model.encoder, x)))
    return float(np.mean(np.log(rho.value)))


def test_calibration_freezes_encoder_and_input(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg)
    before = {k: v.tobytes() for k, v in model.encoder.items()}
    cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=3)
    assert {k: v.tobytes() for k, v in cal.encoder.items()} == before
    assert not cal.domain.equals(model.domain) and not cal.mapper.equals(model.mapper)
    again = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=3)
    assert again.domain.equals(cal.domain) and again.classifier.equals(cal.classifier)


def test_zero_rate_calibration_keeps_rho(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg)
    cfg0 = cfg.with_(**{"train.calibration_lr": 0.0})
    cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg0, seed=3)
    _, rho_before, _ = fused_features(model, ep.query_x)
    _, rho_after, _ = fused_features(cal, ep.query_x)
    assert rho_before.tobytes() == rho_after.tobytes()


def test_one_calibration_step_does_not_lower_support_log_rho(trained):
    cfg, data, model = trained
    for seed in range(5):
        ep = target_episode(data, cfg, seed=seed)
        cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=seed)
        assert support_log_rho(cal, ep.support_x) >= support_log_rho(model, ep.support_x)


def test_calibration_matches_manual_step(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg, seed=1)
    cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=9)
    noise = make_pseudo_unseen(ep.support_x, 0.0, domain_stats(ep.support_x), 9)
    g = Graph()
    fd, mp = g.bind(model.domain), g.bind(model.mapper)
    rs = difficulty_score(g, fd, mp, g.constant(encode_np(model.encoder, ep.support_x)))
    rn = difficulty_score(g, fd, mp, g.constant(encode_np(model.encoder, noise)))
    gd = grads_by_name(g, backward(g, losses.discriminator_loss(g, rs, rn, 1.0)), fd)
    gg = grads_by_name(g, backward(g, losses.generator_loss(g, rn, 1.0)), mp)
    lr = cfg.train.calibration_lr
    for k in model.domain:
        np.testing.assert_allclose(cal.domain[k], model.domain[k] - lr * gd[k], rtol=1e-13, atol=1e-16)
    for k in model.mapper:
        np.testing.assert_allclose(cal.mapper[k], model.mapper[k] - lr * gg[k], rtol=1e-13, atol=1e-16)


def test_second_calibration_rejected(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg)
    cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=0)
    with pytest.raises(ProtocolError):
        calibrate(cal, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=0)


def test_empty_support_rejected(trained):
    cfg, _, model = trained
    with pytest.raises(ValueError):
        calibrate(model, np.zeros((0, 16)), np.zeros(0, dtype=int), 5, cfg, seed=0)


def test_saturated_classifier_scores_one(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg)
    cal = calibrate(model, ep.support_x, ep.support_y, cfg.protocol.way, cfg, seed=0)
    # one query point per class, classified by prototypes placed exactly on them
    pick = [np.flatnonzero(ep.query_y == k)[0] for k in range(cfg.protocol.way)]
    qx, qy = ep.query_x[pick], ep.query_y[pick]
    _, _, c = fused_features(cal, qx)
    clf = prototype_classifier(c, qy, cfg.protocol.way)
    big = ParamSet({"w0": 1e6 * clf["w0"], "b0": 1e6 * clf["b0"]})
    assert evaluate_episode(replace(cal, classifier=big), qx, qy)["accuracy"] == 1.0


def test_random_classifier_is_at_chance(trained):
    cfg, data, model = trained
    rng = np.random.default_rng(0)
    accs = []
    for seed in range(300):
        ep = target_episode(data, cfg, seed=seed)
        cal = calibrate(model, ep.support_x, ep.support_y, 5, cfg, seed=seed)
        rand = ParamSet({"w0": rng.standard_normal((32, 5)), "b0": np.zeros(5)})
        accs.append(evaluate_episode(replace(cal, classifier=rand), ep.query_x, ep.query_y)["accuracy"])
    assert abs(np.mean(accs) - 0.2) < max(ci_halfwidth(accs), 0.02)


def test_accuracy_invariant_to_query_permutation(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg, seed=4)
    cal = calibrate(model, ep.support_x, ep.support_y, 5, cfg, seed=4)
    perm = np.random.default_rng(1).permutation(len(ep.query_y))
    a = evaluate_episode(cal, ep.query_x, ep.query_y)
    b = evaluate_episode(cal, ep.query_x[perm], ep.query_y[perm])
    assert a["accuracy"] == b["accuracy"]


def test_rho_off_reproduces_plain_encoder_path(trained):
    cfg, data, model = trained
    ep = target_episode(data, cfg, seed=5)
    cal = calibrate(model, ep.support_x, ep.support_y, 5, cfg, seed=5)
    off = replace(cal, rho_off=True)
    z = encode_np(cal.encoder, ep.query_x)
    plain = ((z @ cal.classifier["w0"] + cal.classifier["b0"]).argmax(axis=1) == ep.query_y).mean()
    assert evaluate_episode(off, ep.query_x, ep.query_y)["accuracy"] == plain
    _, rho, c = fused_features(cal, ep.query_x, rho_off=True)
    assert c.tobytes() == z.tobytes() and not rho.any()


def test_ci_closed_forms():
    assert ci_halfwidth(np.full(50, 0.4)) == 0.0
    p = 0.6
    draws = np.random.default_rng(2).binomial(1, p, 1000).astype(float)
    want = 1.96 * np.sqrt(p * (1 - p) / 1000)
    assert abs(ci_halfwidth(draws) - want) / want < 0.10


def test_meta_test_thousand_rows(trained, tmp_path):
    cfg, data, model = trained
    cfg = cfg.with_(**{"protocol.shot": 1})
    rep = run_meta_test(model, data.targets["heavy"], cfg, 7, data.source.x, tasks=1000, target_name="heavy")
    assert rep.n_tasks == 1000 and [r["task_id"] for r in rep.rows] == list(range(1000))
    # each accuracy is a count over 5 * 15 = 75 query points
    counts = rep.accuracies * 75
    assert np.allclose(counts, np.round(counts), atol=1e-9)
    assert np.all((rep.accuracies >= 0) & (rep.accuracies <= 1)) and rep.ci95 >= 0
    assert abs(rep.mean - sum(r["accuracy"] for r in rep.rows) / 1000) < 1e-12

    rep.write(tmp_path / "eval")
    summary = json.loads((tmp_path / "eval.json").read_text())
    with open(tmp_path / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1000
    assert abs(summary["mean_accuracy"] - np.mean([float(r["accuracy"]) for r in rows])) < 1e-12


def test_meta_test_deterministic_and_parallel_merge(trained):
    cfg, data, model = trained
    a = run_meta_test(model, data.targets["mild"], cfg, 3, data.source.x, tasks=8)
    b = run_meta_test(model, data.targets["mild"], cfg, 3, data.source.x, tasks=8, parallel=2)
    assert a.rows_csv() == b.rows_csv() and a.emd_source_target == b.emd_source_target


def test_meta_test_needs_tasks(trained):
    cfg, data, model = trained
    with pytest.raises(ValueError):
        run_meta_test(model, data.targets["mild"], cfg, 3, data.source.x, tasks=0)


def test_report_summary_fields():
    rows = [{"task_id": i, "seed": i, "accuracy": a, "mean_rho": 0.5, "mean_rho_fused": 0.4, "emd": 1.0}
            for i, a in enumerate([0.2, 0.4, 0.9])]
    rep = EvalReport(rows, 2.5, "abc", 1)
    s = rep.summary()
    assert s["tasks"] == 3 and s["mean_accuracy"] == pytest.approx(0.5, abs=1e-15)
    assert s["emd_source_target"] == 2.5 and s["mean_rho_fused"] == pytest.approx(0.4)
    assert rep.rows_csv().splitlines()[0] == "task_id,seed,accuracy,mean_rho,mean_rho_fused,emd"


def test_kappa_grid_has_51_points():
    grid = kappa_grid()
    assert len(grid) == 51 and grid[0] == 0.0 and grid[-1] == 10.0 and grid[1] == 0.2
    assert sweep_csv([{"kappa": k, "mean_accuracy": 0.5, "ci95": 0.0} for k in grid]).count("\n") == 52


def test_kappa_zero_sweep_equals_supervised_ablation(small_cfg):
    cfg = small_cfg.with_(**{"protocol.tasks": 4, "train.meta_episodes": 3})
    data = build_data(cfg)
    rows = sweep_kappa(cfg, [0.0], data)
    ablation = run_ablation(cfg, [cfg.benchmark.eval_target], data)
    sup = ablation["supervised"][cfg.benchmark.eval_target]
    assert rows[0]["mean_accuracy"] == sup.mean and rows[0]["ci95"] == sup.ci95
    assert sweep_kappa(cfg, [0.0], data) == rows
