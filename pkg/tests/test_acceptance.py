"""Acceptance criteria, one test each, at the stated tolerances and time budgets.

Every test carries a ``criterion`` marker; the summary at the end of a pytest
run lists one PASS/FAIL line per criterion.
"""
import json
import os
import time

import numpy as np
import pytest
from click.testing import CliRunner

from affuse import _kernels, gradcheck
from affuse import tensor as T
from affuse.cli import main
from affuse.data import WindowSpec, align_indices, make_windows, window_starts
from affuse.ensemble import MergePolicy, ccc_center, merge
from affuse.metrics import ccc, ccc_loss, pearson
from affuse.model import BranchEncoder, FusionConfig, ModelBundle, encode_branch, leader_follower_attention
from affuse.nn import DilatedCausalConv, LayerNorm, LinearLayer, TCNStack, TemporalBlock
from affuse.synthetic import make_trials, write_raw_dataset
from affuse.trainer import AdamState, TrainerConfig, TrainerState, controller_update, evaluate, train_epoch

from oracles import brute_attention, centre_oracle, nearest_oracle


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1, "alignment golden test (30 Hz labels, 100 Hz features)")
def test_c1_alignment(request):
    t0 = time.perf_counter()
    got = align_indices(30.0, 100.0, 4, 1000).tolist()
    elapsed = time.perf_counter() - t0
    detail(request, f"{got} in {elapsed * 1e3:.2f} ms")
    assert got == [0, 3, 7, 10]
    assert got == nearest_oracle(30.0, 100.0, 4, 1000)
    assert elapsed < 1.0


# ---------------------------------------------------------------------------


def _projection_loss(fn, out_shape, rng):
    g = rng.standard_normal(out_shape)
    return lambda: T.tsum(fn() * T.Tensor(g))


@pytest.mark.criterion(2, "gradient suite, max relative error < 1e-6")
def test_c2_gradients(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    t_len = 12
    results = []

    def elementwise(label, fn, params, out_shape, randomize=None):
        gradcheck.randomize_parameters(params if randomize is None else randomize, rng)
        for r in gradcheck.check_elementwise(_projection_loss(fn, out_shape, rng), params):
            r.name = f"{label}/{r.name}"
            results.append(r)

    x = T.Tensor(rng.standard_normal((2, 6, t_len)))
    lin = LinearLayer(6, 5, rng)
    elementwise("linear", lambda: lin(x), lin.parameters(), (2, 5, t_len))
    conv = DilatedCausalConv(6, 5, 5, 2, rng)
    elementwise("conv", lambda: conv(x), conv.parameters(), (2, 5, t_len))
    block = TemporalBlock(6, 5, 5, 2, 0.1, rng)
    elementwise("temporal_block", lambda: block(x), block.parameters(), (2, 5, t_len))
    stack = TCNStack(6, 5, num_levels=4, rng=rng)
    elementwise("tcn_stack", lambda: stack(x), stack.parameters(), (2, 5, t_len))

    enc = BranchEncoder(128, 32, rng)
    feats = T.Tensor(rng.standard_normal((128, t_len)))
    elementwise("branch_encoder", lambda: T.concat(list(encode_branch(feats, enc)), axis=0),
                enc.parameters(), (96, t_len))

    qkv = [[T.Tensor(rng.standard_normal((32, t_len)), requires_grad=True, name=f"{g}{i}")
            for i in range(3)] for g in "qkv"]
    norm = LayerNorm(96)
    flat = [t for grp in qkv for t in grp]
    elementwise("fusion_attention", lambda: leader_follower_attention(*qkv, norm=norm),
                flat + norm.parameters(), (96, t_len), randomize=norm.parameters())

    for kind in ("unimodal", "multimodal"):
        model = ModelBundle(FusionConfig(kind=kind), seed=7)
        gradcheck.randomize_parameters(model.parameters(), rng)
        inputs = {m: rng.standard_normal((d, t_len)) for m, d in model.config.input_dims.items()}
        target = rng.uniform(-1, 1, t_len)
        names = [n for n, _ in model.named_parameters()]
        for r in gradcheck.check_directional(lambda: ccc_loss(model(inputs), target), model.parameters(),
                                             names, rng=rng, directions=3):
            r.name = f"{kind}/{r.name}"
            results.append(r)

    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    detail(request, f"{len(results)} tensors, worst {worst.name} {worst.error:.2e}, {elapsed:.1f} s")
    assert worst.error < 1e-6, [r for r in results if not r.ok]
    assert elapsed < 120


# ---------------------------------------------------------------------------


@pytest.mark.criterion(3, "causality and receptive-field boundary")
def test_c3_causality(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    t_len = 300
    configs = {"visual": (512, 128), "mfcc": (39, 32), "vggish": (128, 32)}
    checked = 0
    for name, (c_in, c_out) in configs.items():
        stack = TCNStack(c_in, c_out, rng=rng)
        assert stack.receptive_field == 121
        # generic weights so a change can propagate all the way to the boundary
        gradcheck.randomize_parameters(stack.parameters(), rng)
        x = rng.standard_normal((c_in, t_len))
        base = stack(T.Tensor(x)).data
        for _ in range(100):
            p = int(rng.integers(0, t_len - 121))
            x2 = x.copy()
            x2[rng.integers(0, c_in), p] += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0)
            out = stack(T.Tensor(x2)).data
            assert np.array_equal(out[:, :p], base[:, :p]), (name, p)
            assert np.array_equal(out[:, p + 121:], base[:, p + 121:]), (name, p)
            assert not np.array_equal(out[:, p + 120], base[:, p + 120]), (name, p)
            checked += 1
    elapsed = time.perf_counter() - t0
    detail(request, f"{checked} perturbations over {len(configs)} TCN configurations, {elapsed:.1f} s")
    assert elapsed < 60


# ---------------------------------------------------------------------------


@pytest.mark.criterion(4, "fusion attention equals the per-step 3x3 brute force")
def test_c4_attention_oracle(request):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        t_len = int(rng.integers(1, 9))
        scale = rng.uniform(0.1, 3.0)
        q, k, v = [[rng.standard_normal((32, t_len)) * scale for _ in range(3)] for _ in range(3)]
        out = leader_follower_attention(*[[T.Tensor(a) for a in grp] for grp in (q, k, v)]).data
        worst = max(worst, float(np.abs(out - brute_attention(q, k, v)).max()))
    q0 = [np.zeros((32, 5))] * 3
    k, v = [[rng.standard_normal((32, 5)) for _ in range(3)] for _ in range(2)]
    out = leader_follower_attention(*[[T.Tensor(a) for a in grp] for grp in (q0, k, v)]).data
    expected = np.tile(4.0 / 3.0 * (v[0] + v[1] + v[2]), (3, 1))
    zero_err = float(np.abs(out - expected).max())
    detail(request, f"max |diff| {worst:.1e} over 50 instances; Q=0 error {zero_err:.1e}")
    assert worst < 1e-10
    assert zero_err < 1e-12


# ---------------------------------------------------------------------------


@pytest.mark.criterion(5, "CCC properties, hand case, and loss gradient")
def test_c5_ccc(request):
    rng = np.random.default_rng(5)
    hand = ccc([0, 1, 2], [3, 4, 5])
    assert abs(hand - 4 / 31) < 1e-12
    for _ in range(200):
        n = int(rng.integers(3, 50))
        x = rng.normal(rng.normal(), rng.uniform(0.1, 3), n)
        y = 0.5 * x + rng.normal(rng.normal(), rng.uniform(0.1, 3), n)
        a = rng.normal(0, 10)
        assert abs(ccc(x, x) - 1.0) < 1e-12
        assert ccc(x, y) == ccc(y, x)
        assert abs(ccc(x + a, y + a) - ccc(x, y)) < 1e-9
        assert abs(ccc(x, y)) <= abs(pearson(x, y)) + 1e-12
    results = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        p = T.Tensor(r.standard_normal(16), requires_grad=True)
        y = r.standard_normal(16)
        results += gradcheck.check_elementwise(lambda: ccc_loss(p, y), [p])
    worst = max(r.error for r in results)
    detail(request, f"hand case {hand!r}; loss gradient worst {worst:.1e}")
    assert worst < 1e-6


# ---------------------------------------------------------------------------


def _trace(vals, config, num_groups):
    state = TrainerState(current_lr=config.lr, num_groups=num_groups)
    actions = {}
    for v in vals:
        epoch = state.epoch
        state, a = controller_update(state, v, config)
        if a != "none":
            actions[epoch] = a
        if a == "stop":
            break
    return actions, state


@pytest.mark.criterion(6, "controller action tables")
def test_c6_controller(request):
    flat, _ = _trace([0.42] * 100, TrainerConfig(), num_groups=2)
    assert flat == {5: "reduce_lr", 10: "release_group", 15: "release_group", 20: "stop"}
    short, _ = _trace([0.42] * 100, TrainerConfig(early_stop=12), num_groups=3)
    assert short == {5: "reduce_lr", 10: "release_group", 12: "stop"}
    # groups left to release at epoch 20: only the stagnation counter can stop the run
    many, state = _trace([0.42] * 100, TrainerConfig(), num_groups=4)
    assert many == {5: "reduce_lr", 10: "release_group", 15: "release_group", 20: "stop"}
    assert state.stagnation_counter == 20 and state.released_group_count < state.num_groups
    detail(request, f"flat two-group trace {flat}")


# ---------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(7, "overfit sanity on one core; T=700 window starts")
def test_c7_overfit(request):
    from threadpoolctl import threadpool_limits

    assert window_starts(700, WindowSpec()) == [0, 200, 400]
    trials = make_trials(8, 300, seed=0)
    windows = make_windows(trials)
    assert len(windows) == 8
    model = ModelBundle(FusionConfig(), seed=0)
    config = TrainerConfig(seed=0)
    adam = AdamState.for_params(model.parameters())
    rng = np.random.default_rng(config.seed)
    prev_threads = _kernels.numba.get_num_threads() if _kernels.HAVE_NUMBA else None
    t0 = time.perf_counter()
    reached, score = None, float("nan")
    try:
        if prev_threads is not None:
            _kernels.numba.set_num_threads(1)
        with threadpool_limits(1):
            for epoch in range(200):
                train_epoch(model, windows, adam, config.lr, rng, config)
                score = evaluate(model, windows, config.batch_size)
                if score >= 0.95:
                    reached = epoch
                    break
    finally:
        if prev_threads is not None:
            _kernels.numba.set_num_threads(prev_threads)
    elapsed = time.perf_counter() - t0
    detail(request, f"train CCC {score:.4f} at epoch {reached} (lr {config.lr:g}), {elapsed:.0f} s")
    assert reached is not None
    assert elapsed < 600


# ---------------------------------------------------------------------------


@pytest.mark.criterion(8, "ensemble merge suite")
def test_c8_ensemble(request):
    rng = np.random.default_rng(8)
    t = rng.uniform(-0.8, 0.8, 40)
    np.testing.assert_allclose(ccc_center([t] * 6), t, atol=1e-15)
    np.testing.assert_allclose(ccc_center([[0, 1, 2], [1, 2, 3]]), [0.5, 1.5, 2.5], atol=1e-15)
    inside = [t + rng.normal(0, 0.05, 40) for _ in range(4)]
    inside = [np.clip(x, -0.99, 0.99) for x in inside]
    assert np.array_equal(merge(inside, MergePolicy("early_clip")), merge(inside, MergePolicy("late_clip")))
    crafted = [x.copy() for x in inside]
    crafted[1][7] = 1.8
    early = merge(crafted, MergePolicy("early_clip"))
    late = merge(crafted, MergePolicy("late_clip"))
    np.testing.assert_allclose(early, np.clip(centre_oracle([np.clip(x, -1, 1) for x in crafted]), -1, 1),
                               atol=1e-12)
    np.testing.assert_allclose(late, np.clip(centre_oracle(crafted), -1, 1), atol=1e-12)
    assert early[7] != late[7]
    for _ in range(200):
        k = int(rng.integers(1, 7))
        traces = rng.normal(0, rng.uniform(0.1, 3), (k, 25)) + rng.normal(0, 1, (k, 1))
        for order in ("early_clip", "late_clip"):
            out = merge(list(traces), MergePolicy(order))
            assert out.shape == (25,) and (out >= -1).all() and (out <= 1).all()
    detail(request, f"crafted frame: early {early[7]:.4f} vs late {late[7]:.4f}")


# ---------------------------------------------------------------------------


def _run_pipeline(root):
    """prepare -> folds -> train (folds 0, 1) -> predict -> merge, all through the CLI."""
    runner = CliRunner()

    def run(*args):
        res = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
        assert res.exit_code == 0, res.output

    manifest = write_raw_dataset(os.path.join(root, "raw"), n_subjects=7, length=90, val_subjects=1, seed=9)
    cfg = {"trainer": {"max_epochs": 2, "lr": 1e-4, "min_lr": 1e-6},
           "paths": {"manifest": manifest, "prepared": os.path.join(root, "prep"),
                     "folds": os.path.join(root, "folds.json"), "out": os.path.join(root, "runs")},
           "seed": 11}
    cfg_path = os.path.join(root, "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    run("prepare", "--config", cfg_path)
    run("folds", "--config", cfg_path)
    trace_dirs = []
    for fold in (0, 1):
        run("train", "--config", cfg_path, "--fold", fold)
        ckpt = os.path.join(root, "runs", "valence", f"fold{fold}", "model.afmd")
        trace_dirs.append(os.path.join(root, "traces", f"fold{fold}"))
        run("predict", "--checkpoint", ckpt, "--prepared", cfg["paths"]["prepared"], "--out", trace_dirs[-1])
    run("merge", *trace_dirs, "--out", os.path.join(root, "merged"))


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            rel = os.path.relpath(path, root)
            if rel != "config.json" and not rel.startswith("raw"):
                with open(path, "rb") as fh:
                    out[rel] = fh.read()
    return out


@pytest.mark.criterion(9, "two seeded pipeline runs are byte-identical")
def test_c9_determinism(request, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    _run_pipeline(str(a))
    _run_pipeline(str(b))
    ta, tb = _tree(a), _tree(b)
    kinds = {ext: sum(k.endswith(ext) for k in ta) for ext in (".afsq", ".afmd", "history.csv")}
    kinds["traces"] = sum(k.startswith(("traces", "merged")) for k in ta)
    assert kinds[".afsq"] == 21 and kinds[".afmd"] == 2 and kinds["history.csv"] == 2 and kinds["traces"] == 21
    assert sorted(ta) == sorted(tb)
    differing = [k for k in ta if ta[k] != tb[k]]
    detail(request, f"{len(ta)} files compared {kinds}, {len(differing)} differ")
    assert not differing


# ---------------------------------------------------------------------------


@pytest.mark.criterion(10, "fold audit on a 30-subject manifest")
def test_c10_folds(request, tmp_path):
    manifest = write_raw_dataset(str(tmp_path / "raw"), n_subjects=30, length=8, val_subjects=5, seed=10)
    out = tmp_path / "folds.json"
    res = CliRunner().invoke(main, ["folds", "--manifest", manifest, "--seed", "10", "--out", str(out)])
    assert res.exit_code == 0, res.output
    with open(manifest) as fh:
        entries = json.load(fh)["trials"]
    subject = {e["trial_id"]: e["subject_id"] for e in entries}
    folds = json.loads(out.read_text())["folds"]
    assert [f["fold_id"] for f in folds] == list(range(6))
    sizes = []
    for f in folds:
        train_s = {subject[t] for t in f["train"]}
        val_s = {subject[t] for t in f["val"]}
        assert not train_s & val_s
        assert len(train_s | val_s) == 30
        sizes.append(len(val_s))
    assert sorted(folds[0]["val"]) == sorted(e["trial_id"] for e in entries if e["partition"] == "val")
    assert sorted(folds[0]["train"]) == sorted(e["trial_id"] for e in entries if e["partition"] == "train")
    validated = [subject[t] for f in folds for t in f["val"]]
    assert sorted(validated) == sorted(set(subject.values()))
    detail(request, f"validation subjects per fold {sizes}")
    assert all(abs(s - 5) <= 1 for s in sizes)
