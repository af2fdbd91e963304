import math

import numpy as np
import pytest

from cdakit.adaptation import (AdapterParams, StageError, TrainConfig, backward, forward, init_params,
                               load_checkpoint, run_cda, save_checkpoint, softmax_cls_loss,
                               stage2_mmd_adapt, stage4_pseudo_adapt, target_head_from_clusters,
                               total_loss, write_history_csv, hidden_mmd, kernel_specs_for)
from cdakit.clustering import ClusterConfig, PseudoLabeling
from cdakit.embedding_io import EmbeddingSet, SynthConfig, synthesize_domain_pair
from cdakit.kernels import bandwidth_ladder, mmd_biased


def random_params(rng, d_in=4, d_out=3, ns=3, nt=2):
    return AdapterParams(
        weight=rng.normal(0, 0.7, (d_out, d_in)), bias=rng.normal(0, 0.3, d_out),
        source_classifier=rng.normal(0, 1, (ns, d_out)), source_bias=rng.normal(0, 0.3, ns),
        target_classifier=rng.normal(0, 1, (nt, d_out)) if nt else None,
        target_bias=rng.normal(0, 0.3, nt) if nt else None,
    )


def random_batches(rng, p, n=6):
    xs = rng.standard_normal((n, p.d_in))
    xt = rng.standard_normal((n + 1, p.d_in)) + 0.4
    ys = rng.integers(0, p.n_source_classes, n)
    yt = rng.integers(0, p.n_target_classes, n + 1) if p.target_classifier is not None else None
    return (xs, ys), xt, ((xt, yt) if yt is not None else None)


def test_forward_matches_matrix_oracle():
    rng = np.random.default_rng(60)
    for _ in range(20):
        p = random_params(rng)
        x = rng.standard_normal((5, 4))
        f = forward(p, x)
        for i in range(5):
            pre = [sum(p.weight[k, j] * x[i, j] for j in range(4)) + p.bias[k] for k in range(3)]
            h = [math.tanh(v) for v in pre]
            s = [sum(p.source_classifier[c, k] * h[k] for k in range(3)) + p.source_bias[c] for c in range(3)]
            assert np.max(np.abs(f.pre[i] - pre)) < 1e-12
            assert np.max(np.abs(f.hidden[i] - h)) < 1e-12
            assert np.max(np.abs(f.source_logits[i] - s)) < 1e-12


def test_forward_examples():
    p = AdapterParams(np.eye(3), np.zeros(3), np.ones((2, 3)), np.array([0.5, -0.5]))
    x = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(forward(p, x).hidden, np.tanh(x))
    f = forward(p, np.zeros(3))
    assert np.all(f.hidden == 0) and f.source_logits.tolist() == [0.5, -0.5]
    with pytest.raises(ValueError, match="dimension"):
        forward(p, np.zeros(4))


def test_softmax_examples():
    assert softmax_cls_loss(np.zeros((1, 4)), [2]) == pytest.approx(math.log(4), abs=1e-12)
    assert softmax_cls_loss(np.zeros((1, 4)), [2]) == pytest.approx(1.3862944, abs=1e-7)
    assert softmax_cls_loss([[20.0, 0.0]], [0]) < 1e-8
    logits = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.5]]
    labels = [0, 0, 1]
    hand = [math.log(1 + math.exp(-1.0)), math.log(1 + math.exp(2.0)), math.log(1 + math.exp(-2.5))]
    assert softmax_cls_loss(logits, labels) == pytest.approx(sum(hand) / 3, abs=1e-10)


def test_softmax_is_stable_for_huge_logits():
    assert softmax_cls_loss([[1e4, -1e4]], [1]) == pytest.approx(2e4)


def test_total_loss_term_removal_and_identity():
    rng = np.random.default_rng(61)
    p = random_params(rng, nt=0)
    (xs, ys), xt, _ = random_batches(rng, p)
    cfg = TrainConfig(lam=0.0)
    spec = bandwidth_ladder(1.0, 3)
    assert total_loss((xs, ys), None, None, p, None, cfg).total == softmax_cls_loss(forward(p, xs).source_logits, ys)
    lb = total_loss((xs, ys), xs, None, p, spec, TrainConfig(lam=0.7))
    assert abs(lb.mmd) < 1e-10


def test_total_loss_matches_independent_terms():
    rng = np.random.default_rng(62)
    for layers in ("last", "last_two"):
        for _ in range(10):
            p = random_params(rng)
            bs, xt, pseudo = random_batches(rng, p)
            spec, pre_spec = bandwidth_ladder(0.8, 3), bandwidth_ladder(2.0, 2)
            lam = float(rng.uniform(0, 3))
            cfg = TrainConfig(lam=lam, mmd_layers=layers)
            lb = total_loss(bs, xt, pseudo, p, spec, cfg, pre_spec)
            fs, ft, fp = forward(p, bs[0]), forward(p, xt), forward(p, pseudo[0])
            ls = softmax_cls_loss(fs.source_logits, bs[1])
            mmd = mmd_biased(fs.hidden, ft.hidden, spec).value
            if layers == "last_two":
                mmd += mmd_biased(fs.pre, ft.pre, pre_spec).value
            lt = softmax_cls_loss(fp.target_logits, pseudo[1])
            assert abs(lb.source_cls - ls) < 1e-10
            assert abs(lb.mmd - mmd) < 1e-10
            assert abs(lb.target_pseudo_cls - lt) < 1e-10
            assert abs(lb.total - (ls + lam * mmd + lt)) < 1e-10
            assert abs(lb.total - (lb.source_cls + lam * lb.mmd + lb.target_pseudo_cls)) < 1e-10


def test_loss_is_linear_in_lambda():
    rng = np.random.default_rng(63)
    p = random_params(rng)
    bs, xt, _ = random_batches(rng, p)
    spec = bandwidth_ladder(1.0, 2)
    t = [total_loss(bs, xt, None, p, spec, TrainConfig(lam=lam)).total for lam in (0.0, 1.0, 2.5)]
    slope = t[1] - t[0]
    assert abs(t[2] - (t[0] + 2.5 * slope)) < 1e-12


def numeric_grads(p, bs, xt, pseudo, spec, cfg, step=1e-5):
    out = {}
    for name, arr in p.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = total_loss(bs, xt, pseudo, p, spec, cfg).total
            arr[idx] = old - step
            down = total_loss(bs, xt, pseudo, p, spec, cfg).total
            arr[idx] = old
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out


def check_grads(analytic, numeric, floor=1e-6):
    for name, g in numeric.items():
        a = analytic[name]
        rel = np.abs(a - g) / np.maximum(np.maximum(np.abs(a), np.abs(g)), floor)
        assert rel.max() < 1e-4, (name, rel.max())


@pytest.mark.parametrize("stage", ["source_only", "mmd_last", "mmd_last_two", "pseudo", "all"])
def test_gradients_match_finite_differences(stage):
    rng = np.random.default_rng(64 + len(stage))
    for _ in range(20):
        p = random_params(rng)
        bs, xt, pseudo = random_batches(rng, p)
        spec = bandwidth_ladder(float(rng.uniform(0.5, 3)), int(rng.integers(1, 6)))
        layers = "last" if stage == "mmd_last" else "last_two"
        cfg = TrainConfig(lam=float(rng.uniform(0.1, 2)), mmd_layers=layers)
        use_t = stage.startswith("mmd") or stage == "all"
        use_s = stage != "pseudo"
        use_p = stage in ("pseudo", "all")
        args = (bs if use_s else None, xt if use_t else None, pseudo if use_p else None)
        s = spec if use_t else None
        check_grads(backward(*args, p, s, cfg), numeric_grads(p, *args, s, cfg))


def test_gradient_vanishes_at_stationary_point():
    # zero weights give zero hidden units; uniform logits and identical batches make every term flat
    p = AdapterParams(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))
    x = np.random.default_rng(65).standard_normal((4, 3))
    y = np.array([0, 1, 0, 1])
    g = backward((x, y), x, None, p, bandwidth_ladder(1.0, 2), TrainConfig())
    assert math.sqrt(sum(float(np.sum(v**2)) for v in g.values())) < 1e-8


def separable_source(seed, n_per=40, d=6, classes=3):
    rng = np.random.default_rng(seed)
    means = 3 * np.eye(d)[:classes]
    y = np.repeat(np.arange(classes), n_per)
    return EmbeddingSet(means[y] + 0.3 * rng.standard_normal((len(y), d)), y)


def test_source_only_training_fits_separable_data():
    src = separable_source(0)
    p0 = init_params(6, 3, rng=np.random.default_rng(0))
    p, hist = stage2_mmd_adapt(src, None, p0, TrainConfig(lam=0.0, max_iters=2000, batch_size=32), None)
    acc = np.mean(np.argmax(forward(p, src.vectors).source_logits, axis=1) == src.labels)
    assert acc >= 0.95
    assert hist[-1]["total"] < hist[0]["total"]


def test_pseudo_stage_fits_true_labels_and_leaves_source_head():
    tgt = separable_source(1)
    p0 = init_params(6, 3, rng=np.random.default_rng(1))
    pseudo = PseudoLabeling(tgt.labels.copy())
    p, _ = stage4_pseudo_adapt(EmbeddingSet(tgt.vectors), pseudo, p0, TrainConfig(max_iters=600, batch_size=32))
    acc = np.mean(np.argmax(forward(p, tgt.vectors).target_logits, axis=1) == tgt.labels)
    assert acc >= 0.95
    assert np.array_equal(p.source_classifier, p0.source_classifier)
    assert np.array_equal(p.source_bias, p0.source_bias)
    assert not np.array_equal(p.weight, p0.weight)


def test_pseudo_stage_ignores_unassigned_rows():
    tgt = separable_source(2)
    a = tgt.labels.copy()
    a[::3] = -1
    p0 = init_params(6, 3, rng=np.random.default_rng(2))
    cfg = TrainConfig(max_iters=30, batch_size=16)
    x = tgt.vectors.copy()
    p1, _ = stage4_pseudo_adapt(EmbeddingSet(x), PseudoLabeling(a), p0, cfg)
    x[::3] = 1e6  # unassigned rows must not matter
    p2, _ = stage4_pseudo_adapt(EmbeddingSet(x), PseudoLabeling(a), p0, cfg)
    assert np.array_equal(p1.weight, p2.weight)


def test_pseudo_stage_needs_two_clusters():
    tgt = separable_source(3)
    p0 = init_params(6, 3)
    with pytest.raises(ValueError, match="at least 2"):
        stage4_pseudo_adapt(EmbeddingSet(tgt.vectors), PseudoLabeling(np.zeros(tgt.n, dtype=np.int64)),
                            p0, TrainConfig(max_iters=5))


def test_target_head_starts_at_normalized_cluster_means():
    rng = np.random.default_rng(66)
    p = random_params(rng, nt=0)
    x = rng.standard_normal((6, 4))
    a = np.array([0, 1, 0, -1, 1, 1])
    out = target_head_from_clusters(p, x, PseudoLabeling(a))
    h = forward(p, x).hidden
    for k in range(2):
        m = h[a == k].mean(axis=0)
        assert np.allclose(out.target_classifier[k], m / np.linalg.norm(m), atol=1e-12)
    assert np.all(out.target_bias == 0) and p.target_classifier is None


def small_pair(seed, shift=0.63, spread=0.21):
    return synthesize_domain_pair(SynthConfig(10, 30, 112, spread, shift, 0.0, seed))


def test_mmd_training_shrinks_hidden_discrepancy():
    s, t = small_pair(0)
    cfg = TrainConfig(max_iters=400)
    p0 = init_params(s.dim, 10, rng=np.random.default_rng(0))
    spec, pre = kernel_specs_for(p0, s.vectors, t.vectors, 5)
    p, _ = stage2_mmd_adapt(s, t, p0, cfg, spec, pre)
    assert hidden_mmd(p, s.vectors, t.vectors, spec) < 0.5 * hidden_mmd(p0, s.vectors, t.vectors, spec)


def test_identical_domains_leave_mmd_near_its_noise_floor():
    before, after = [], []
    for seed in range(10):
        s, t = small_pair(seed, shift=0.0)
        p0 = init_params(s.dim, 10, rng=np.random.default_rng(seed))
        spec, pre = kernel_specs_for(p0, s.vectors, t.vectors, 5)
        p, _ = stage2_mmd_adapt(s, t, p0, TrainConfig(max_iters=100), spec, pre)
        before.append(hidden_mmd(p0, s.vectors, t.vectors, spec))
        after.append(hidden_mmd(p, s.vectors, t.vectors, spec))
    d = np.subtract(after, before)
    # no shift to remove: the change stays within a few standard errors of the seed-to-seed spread
    assert abs(d.mean()) < 3 * np.std(before, ddof=1)


def test_run_cda_is_deterministic_and_reports_progress():
    s, t = small_pair(1)
    cfg = TrainConfig(max_iters=300, seed=4)
    r1 = run_cda(s, t, cfg, ClusterConfig(0.6, 0.8, 3))
    r2 = run_cda(s, t, cfg, ClusterConfig(0.6, 0.8, 3))
    assert r1.histories == r2.histories
    assert np.array_equal(r1.pseudo.assignments, r2.pseudo.assignments)
    for name in ("weight", "target_classifier"):
        assert np.array_equal(getattr(r1.params, name), getattr(r2.params, name))
    assert r1.reports["mmd_adapted"] < r1.reports["mmd_initial"]
    assert r1.pseudo.cluster_count >= 2


def test_run_cda_names_clustering_stage_on_collapse():
    s, t = small_pair(2)
    with pytest.raises(StageError, match="stage-3"):
        run_cda(s, t, TrainConfig(max_iters=50), ClusterConfig(-0.99, 0.8, 3))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(67)
    for k in range(100):
        nt = int(rng.integers(0, 4))
        p = random_params(rng, d_in=int(rng.integers(1, 6)), d_out=int(rng.integers(1, 6)),
                          ns=int(rng.integers(1, 5)), nt=nt)
        p = AdapterParams(**{n: v.astype(np.float32).astype(np.float64) for n, v in p.arrays().items()})
        path = tmp_path / f"{k}.cdap"
        save_checkpoint(p, path)
        back = load_checkpoint(path)
        assert back.arrays().keys() == p.arrays().keys()
        for name, arr in p.arrays().items():
            assert np.array_equal(getattr(back, name), arr)


def test_checkpoint_rejects_corruption(tmp_path):
    p = random_params(np.random.default_rng(68))
    path = tmp_path / "c.cdap"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_history_csv_columns(tmp_path):
    path = tmp_path / "h.csv"
    write_history_csv([{"iter": 10, "source_cls": 0.5, "mmd": 0.1, "target_pseudo_cls": 0.0, "total": 0.55}], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,source_cls,mmd,target_pseudo_cls,total"
    assert lines[1] == "10,0.5,0.1,0.0,0.55"


def test_config_validation():
    for bad in (TrainConfig(lam=-1), TrainConfig(learning_rate=0), TrainConfig(mmd_layers="all"),
                TrainConfig(momentum=1.0), TrainConfig(n_kernels=0)):
        with pytest.raises(ValueError):
            bad.validate()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_iteration():
    from cdakit.adaptation import TrainingDiverged
    src = separable_source(4)
    p0 = init_params(6, 3)
    with pytest.raises(TrainingDiverged, match="iteration"):
        stage2_mmd_adapt(src, None, p0, TrainConfig(lam=0.0, learning_rate=1e308, max_iters=50), None)
