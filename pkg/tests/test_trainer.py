from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from chartshape.policy import AnswerDistribution, PolicyParams, PolicyShape, logits
from chartshape.render import read_pgm
from chartshape.shaping import TrainConfig
from chartshape.trainer import (
    METRIC_FIELDS,
    CheckpointError,
    ConfigError,
    DataError,
    StageEntry,
    StagePlan,
    TrainSet,
    collect_group,
    collect_groups,
    encode_items,
    evaluate,
    load_checkpoint,
    metrics_csv,
    plan_for,
    run_curriculum,
    run_plan,
    save_checkpoint,
    stage_steps,
    start_checkpoint,
    sweep_coefficients,
)
from chartshape.viewgen import GenConfig, build_dataset, load_manifest, write_manifest

D = 10
SMALL = TrainConfig(lr=1e-2, batch=4, group_size=4, hidden=6, stage1_epochs=2, stage2_epochs=2)


def synthetic(n: int, seed: int, prefix: str = "s", pres_every: int = 2) -> TrainSet:
    rng = np.random.default_rng(seed)
    answers = rng.integers(0, 4, size=n)
    x = rng.normal(size=(n, D))
    x[np.arange(n), answers] += 2.0
    return TrainSet(
        ids=tuple(f"{prefix}{i}" for i in range(n)),
        x=x,
        x_pres=x + rng.normal(scale=0.3, size=(n, D)),
        x_abl=rng.normal(size=(n, D)),
        has_pres=np.arange(n) % pres_every == 0,
        answers=answers,
        templates=tuple("t%d" % (i % 3) for i in range(n)),
    )


def _run(cfg, data, seed=0, plan=None, **kw):
    ck = start_checkpoint(cfg, plan or plan_for("bips", cfg), D, seed)
    return run_plan(ck, data, **kw)


# -- rollouts ---------------------------------------------------------------------------


def test_batched_rollouts_match_single_item_sampler():
    data = synthetic(12, 1)
    params = PolicyParams.init(PolicyShape(D, 6), 3)
    rows = np.arange(12)
    batched = collect_groups(data, rows, params, SMALL, np.random.default_rng(9))
    rng = np.random.default_rng(9)
    single = [collect_group(data.ids[r], data.x[r], int(data.answers[r]), params, SMALL, rng) for r in rows]
    for a, b in zip(batched, single):
        assert a.actions.tolist() == b.actions.tolist()
        assert np.allclose(a.old_logprobs, b.old_logprobs, atol=1e-12)
        assert a.advantages == b.advantages


def test_group_rewards_follow_answers():
    data = synthetic(6, 2)
    groups = collect_groups(data, np.arange(6), PolicyParams.init(PolicyShape(D, 6), 0), SMALL, np.random.default_rng(0))
    for g, ans in zip(groups, data.answers):
        assert g.rewards.tolist() == [1.0 if a == ans else 0.1 for a in g.actions]


# -- plans ------------------------------------------------------------------------------------


def test_plans_per_mode():
    cfg = TrainConfig(stage1_epochs=5, stage2_epochs=3)
    assert [(e.tag, e.data) for e in plan_for("bips", cfg).entries] == [("stage1", "pres"), ("stage2", "full")]
    assert [(e.tag, e.data) for e in plan_for("reversed", cfg).entries] == [("stage2", "full"), ("stage1", "pres")]
    (joint,) = plan_for("joint", cfg, n_pres=54, n_full=100).entries
    assert joint.tag == "joint" and joint.epochs == round((5 * 54 + 3 * 100) / 100)
    with pytest.raises(ConfigError):
        plan_for("nope", cfg)
    with pytest.raises(ConfigError):
        StagePlan((StageEntry("stage1", "half", 1),))


# -- reference implementation ----------------------------------------------------------------------
# Plain numpy: clipped-surrogate GRPO with hand-written backprop and AdamW, following the
# documented RNG protocol. Used with alpha = beta = gamma = 0.


def _ref_logp(theta, shape, x, t):
    sl = shape.slices
    w1 = theta[sl["w1"][0]].reshape(sl["w1"][1])
    b1 = theta[sl["b1"][0]]
    w2 = theta[sl["w2"][0]].reshape(sl["w2"][1])
    b2 = theta[sl["b2"][0]]
    h = np.tanh(x @ w1 + b1)
    z = (h @ w2 + b2) / t
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True)), h, (w1, w2)


def _ref_grad(theta, shape, x, actions, old_lp, adv, cfg):
    lp, h, (_, w2) = _ref_logp(theta, shape, x, cfg.temperature)
    b, g = actions.shape
    p = np.exp(lp)
    ratio = np.exp(lp[np.arange(b)[:, None], actions] - old_lp)
    inside = (ratio >= 1 - cfg.epsilon) & (ratio <= 1 + cfg.epsilon)
    unclipped_min = ratio * adv <= np.clip(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon) * adv
    live = unclipped_min | inside
    coef = -(adv * ratio * live) / (b * g)
    dz = np.zeros_like(lp)
    for i in range(b):
        for k in range(g):
            onehot = np.eye(4)[actions[i, k]]
            dz[i] += coef[i, k] * (onehot - p[i])
    dz /= cfg.temperature
    dh = dz @ w2.T * (1 - h * h)
    sl = shape.slices
    grad = np.zeros_like(theta)
    grad[sl["w1"][0]] = (x.T @ dh).ravel()
    grad[sl["b1"][0]] = dh.sum(axis=0)
    grad[sl["w2"][0]] = (h.T @ dz).ravel()
    grad[sl["b2"][0]] = dz.sum(axis=0)
    return grad


def _ref_train(cfg, data, plan, seed, theta):
    shape = PolicyShape(D, cfg.hidden)
    for si, entry in enumerate(plan.entries):
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        t = 0
        rows = np.arange(len(data)) if entry.data == "full" else np.flatnonzero(data.has_pres)
        for epoch in range(entry.epochs):
            order = np.random.default_rng([seed, si, epoch, 7]).permutation(rows)
            for start in range(0, order.size, cfg.batch):
                batch = order[start : start + cfg.batch]
                rng = np.random.default_rng([seed, si, t, 11])
                lp, _, _ = _ref_logp(theta, shape, data.x[batch], cfg.temperature)
                u = rng.random((batch.size, cfg.group_size))
                cdf = np.cumsum(np.exp(lp), axis=1)
                actions = np.array([np.minimum(np.searchsorted(c, uu, side="right"), 3) for c, uu in zip(cdf, u)])
                old = np.take_along_axis(lp, actions, axis=1)
                r = np.where(actions == data.answers[batch][:, None], 1.0, 0.1)
                sd = r.std(axis=1, keepdims=True)
                adv = np.where(sd == 0, 0.0, (r - r.mean(axis=1, keepdims=True)) / (sd + 1e-8))
                g = _ref_grad(theta, shape, data.x[batch], actions, old, adv, cfg)
                t += 1
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                theta = theta * (1 - cfg.lr * cfg.weight_decay)
                theta = theta - cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    return theta


@pytest.mark.parametrize("seed", range(5))
def test_grpo_only_matches_numpy_reference(seed):
    cfg = replace(SMALL, alpha=0.0, beta=0.0, gamma=0.0, lr=1e-3)
    data = synthetic(14, seed + 20)
    plan = plan_for("grpo_only", cfg)
    ck, _ = _run(cfg, data, seed=seed, plan=plan)
    start = start_checkpoint(cfg, plan, D, seed).params.theta
    expected = _ref_train(cfg, data, plan, seed, start.copy())
    assert np.allclose(ck.params.theta, expected, rtol=0, atol=1e-9)
    assert not np.array_equal(ck.params.theta, start)


def test_grpo_only_equals_bips_without_coefficients():
    data = synthetic(16, 4)
    heldout = synthetic(8, 5, prefix="h")
    zero = replace(SMALL, alpha=0.0, beta=0.0)
    a = run_curriculum(zero, "bips", data, heldout, 3)
    b = run_curriculum(SMALL, "grpo_only", data, heldout, 3)
    assert np.array_equal(a.checkpoint.params.theta, b.checkpoint.params.theta)
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)


# -- determinism and resume ---------------------------------------------------------------------------


def test_runs_are_byte_identical(tmp_path):
    data, heldout = synthetic(16, 6), synthetic(8, 7, prefix="h")
    for name in ("a", "b"):
        run_curriculum(SMALL, "bips", data, heldout, 11, out_dir=tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["eval.json", "metrics.csv", "stage1_stage1.ckpt", "stage2_stage2.ckpt"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("cut", [1, 3, 4, 7])
def test_resume_from_checkpoint_is_bit_exact(tmp_path, cut):
    data = synthetic(14, 8)
    full, rows_full = _run(SMALL, data, seed=2)
    part, rows_a = _run(SMALL, data, seed=2, stop_after=cut)
    assert part.global_step == cut
    save_checkpoint(part, tmp_path / "mid.ckpt")
    back = load_checkpoint(tmp_path / "mid.ckpt")
    assert np.array_equal(back.params.theta, part.params.theta)
    assert np.array_equal(back.opt.m, part.opt.m) and back.opt.step == part.opt.step
    done, rows_b = run_plan(back, data)
    assert np.array_equal(done.params.theta, full.params.theta)
    assert metrics_csv(rows_a + rows_b) == metrics_csv(rows_full)


def test_checkpoint_errors(tmp_path):
    ck = start_checkpoint(SMALL, plan_for("bips", SMALL), D, 0)
    path = tmp_path / "x.ckpt"
    save_checkpoint(ck, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage" + raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.ckpt")


# -- stage semantics ---------------------------------------------------------------------------------


def test_stage_entry_resets_reference_and_optimizer():
    data = synthetic(12, 9)
    n1 = stage_steps(data, plan_for("bips", SMALL).entries[0], SMALL.batch)
    assert n1 == SMALL.stage1_epochs * 2  # 6 pres rows in batches of 4
    after1, _ = _run(SMALL, data, stop_after=n1)
    into2, _ = run_plan(after1, data, stop_after=n1 + 1)
    assert after1.stage_index == 1 and after1.stage_step == 0 and after1.global_step == n1
    assert into2.stage_index == 1 and into2.stage_step == 1
    assert np.array_equal(into2.ref, after1.params.theta)
    assert into2.opt.step == 1


def test_stage_terms_touch_only_their_views():
    data = synthetic(12, 10)
    other = replace(data, x_abl=data.x_abl * -3.0)
    only1 = StagePlan((StageEntry("stage1", "pres", 2),))
    a, _ = _run(SMALL, data, plan=only1)
    b, _ = _run(SMALL, other, plan=only1)
    assert np.array_equal(a.params.theta, b.params.theta)
    other = replace(data, x_pres=data.x_pres * -3.0)
    only2 = StagePlan((StageEntry("stage2", "full", 2),))
    a, _ = _run(SMALL, data, plan=only2)
    b, _ = _run(SMALL, other, plan=only2)
    assert np.array_equal(a.params.theta, b.params.theta)


def test_stage1_trains_on_preserving_subset_only():
    data = synthetic(12, 11)
    only1 = StagePlan((StageEntry("stage1", "pres", 1),))
    a, _ = _run(SMALL, data, plan=only1)
    x = data.x.copy()
    x[~data.has_pres] = 0.0
    b, _ = _run(SMALL, replace(data, x=x), plan=only1)
    assert np.array_equal(a.params.theta, b.params.theta)


def test_metrics_rows():
    data = synthetic(12, 12)
    _, rows = _run(SMALL, data)
    head, *body = metrics_csv(rows).splitlines()
    assert head.split(",") == list(METRIC_FIELDS)
    assert [r["step"] for r in rows] == list(range(1, len(rows) + 1))
    assert {r["stage"] for r in rows} == {"stage1", "stage2"}
    assert all(r["l_sep"] == 0.0 for r in rows if r["stage"] == "stage1")
    assert all(r["l_cons"] == 0.0 for r in rows if r["stage"] == "stage2")
    assert all(r["kl_to_ref"] >= -1e-12 for r in rows)


# -- evaluation -----------------------------------------------------------------------------------------


def _oracle_params():
    shape = PolicyShape(D, 4)
    p = PolicyParams.zeros(shape)
    theta = p.theta.copy()
    w1 = np.zeros((D, 4))
    w1[:4, :4] = 5 * np.eye(4)
    theta[shape.slices["w1"][0]] = w1.ravel()
    theta[shape.slices["w2"][0]] = (5 * np.eye(4)).ravel()
    return PolicyParams(shape, theta)


def test_evaluate_perfect_and_blank():
    data = synthetic(40, 13)
    x = np.zeros_like(data.x)
    x[np.arange(len(data)), data.answers] = 1.0
    data = replace(data, x=x, x_pres=x, x_abl=np.zeros_like(x))
    rep = evaluate(_oracle_params(), data)
    assert rep.accuracy == 1.0
    assert rep.kl_pres == 0.0
    assert rep.kl_abl > 0
    # blank features give uniform logits; argmax then always picks option 0
    assert rep.shortcut == float(np.mean(data.answers == 0))
    assert set(rep.per_template.values()) == {1.0}
    assert evaluate(_oracle_params(), data) == rep


def test_evaluate_zero_params_is_uniform():
    data = synthetic(30, 14)
    rep = evaluate(PolicyParams.zeros(PolicyShape(D, 6)), data)
    assert rep.accuracy == float(np.mean(data.answers == 0))
    assert rep.kl_abl == 0.0 and rep.kl_pres == 0.0


# -- data guards and sweeps -------------------------------------------------------------------------------


def test_data_errors():
    data = synthetic(8, 15)
    with pytest.raises(DataError):
        run_curriculum(SMALL, "bips", data, synthetic(4, 16), 0)  # same id prefix
    with pytest.raises(DataError):
        _run(SMALL, replace(data, has_pres=np.zeros(8, dtype=bool)))
    with pytest.raises(DataError):
        run_plan(start_checkpoint(SMALL, plan_for("bips", SMALL), D + 1, 0), data)
    with pytest.raises(DataError):
        encode_items([])


def test_sweep_zero_point_equals_grpo_only():
    data, heldout = synthetic(12, 17), synthetic(6, 18, prefix="h")
    ((value, rep),) = sweep_coefficients(SMALL, "beta", [0.0], data, heldout, 5)
    assert value == 0.0
    assert rep == run_curriculum(SMALL, "grpo_only", data, heldout, 5).final
    with pytest.raises(ConfigError):
        sweep_coefficients(SMALL, "gamma", [0.0], data, heldout, 5)


# -- real items -----------------------------------------------------------------------------------------


def test_encode_items_views(small_corpus):
    items = small_corpus.records[:20]
    ts = encode_items(items)
    assert ts.x.shape == (20, ts.dim)
    assert ts.has_pres.tolist() == [it.pres is not None for it in items]
    no_pres = ~ts.has_pres
    assert np.array_equal(ts.x_pres[no_pres], ts.x[no_pres])
    masked = encode_items(items, random_mask=True)
    assert np.array_equal(masked.x, ts.x)
    assert not np.array_equal(masked.x_abl, ts.x_abl)


def test_random_mask_never_reads_edited_views(tmp_path):
    cfg = GenConfig(target=10)
    path = write_manifest(build_dataset(cfg, 21), tmp_path / "train")
    held = write_manifest(build_dataset(replace(cfg, id_prefix="held"), 22), tmp_path / "held")
    opened = []

    def reader(p):
        opened.append(p.name)
        return read_pgm(p)

    train = load_manifest(path, views=("image",), reader=reader).records
    assert opened and all(not n.endswith(("_abl.pgm", "_pres.pgm")) for n in opened)
    heldout = load_manifest(held).records
    tiny = replace(SMALL, hidden=4, stage1_epochs=1, stage2_epochs=1)
    res = run_curriculum(tiny, "random_mask", train, heldout, 0)
    assert [t for t, _ in res.stage_reports] == ["stage1", "stage2"]
    with pytest.raises(DataError):
        run_curriculum(tiny, "bips", train, heldout, 0)


def test_collect_group_uses_distribution_temperature():
    params = PolicyParams.init(PolicyShape(D, 6), 1)
    x = np.ones(D)
    cfg = replace(SMALL, group_size=4000, temperature=0.5)
    g = collect_group("a", x, 0, params, cfg, np.random.default_rng(0))
    dist = AnswerDistribution.from_logits(logits(params, x)[0], 0.5)
    freq = np.bincount(g.actions, minlength=4) / 4000
    assert np.allclose(freq, dist.probs, atol=0.03)
