"""Acceptance gate: the eleven release criteria, one test per criterion.

Each test is self-contained and carries its stated tolerance and runtime
budget. Run with -v to get one pass/fail line per criterion.
"""

import json
import time

import numpy as np

from annoflow.cli import main as cli_main
from annoflow.compute import finite_diff_check
from annoflow.data import (
    AnnotationDataset,
    SynthConfig,
    binary_schema,
    fold_round,
    normalize_labels,
    ordinal_schema,
    split_folds,
    synth_generate,
)
from annoflow.baselines import GmmConfig, HeadConfig, build_gmm, build_head
from annoflow.flows import FlowConfig, build_flow
from annoflow.infer import (
    discretize_binary,
    discretize_regression,
    head_inputs,
    hybrid_feature_table,
    train_deterministic,
    train_hybrid,
)
from annoflow.metrics import (
    annotation_entropy,
    macro_f1,
    paired_ttest_bonferroni,
    r_squared,
)
from annoflow.personalize import AnnotatorRegistry, PersonalizationConfig
from annoflow.train import (
    TrainConfig,
    build_model,
    config_with,
    model_for_dataset,
    nll_loss_graph,
    run_experiment,
    train_model,
)


def jitter(params, seed, scale=0.4):
    """Move every trainable parameter to a generic random point."""
    rng = np.random.default_rng(seed)
    for name in params.names(trainable_only=True):
        shape = params.value(name).shape
        params.set_value(name, rng.normal(size=shape) * scale)


def plain_dataset(labels, embed_dim=1, seed=0, schema=None):
    """One record per text, single annotator, zero or random embeddings."""
    labels = np.asarray(labels, dtype=np.float64)
    n, dim = labels.shape
    texts = [f"t{i:05d}" for i in range(n)]
    if seed == 0:
        embeddings = {t: np.zeros(embed_dim) for t in texts}
    else:
        rng = np.random.default_rng(seed)
        embeddings = {t: rng.normal(size=embed_dim) for t in texts}
    return AnnotationDataset(
        texts, ["a0"] * n, labels, schema or ordinal_schema(dim), embeddings,
        normalized=True,
    )


def test_criterion_01_flow_invertibility_roundtrip():
    started = time.monotonic()
    rng = np.random.default_rng(1001)
    for kind in ("nice", "realnvp", "maf"):
        dims = (1, 2, 3, 10) if kind == "maf" else (2, 3, 10)
        for dim in dims:
            for case in range(20):
                ctx_dim = int(rng.choice([0, 3]))
                config = FlowConfig(
                    kind=kind,
                    dim=dim,
                    context_dim=ctx_dim,
                    num_layers=int(rng.choice([1, 2, 3])),
                    blocks_per_layer=int(rng.choice([1, 2])),
                    hidden_features=int(rng.choice([4, 8])),
                    activation=str(rng.choice(["tanh", "relu"])),
                    batch_norm_within=bool(rng.choice([False, True])),
                    batch_norm_between=bool(rng.choice([False, True])),
                )
                model = build_flow(config, seed=case)
                jitter(model.params, seed=2000 + case)
                y = rng.normal(0.0, 1.5, size=(4, dim))
                ctx = rng.normal(size=(4, ctx_dim)) if ctx_dim else None
                z, _ = model.forward(y, ctx)
                back = model.inverse(z, ctx)
                err = np.abs(back - y).max()
                assert err < 1e-6, f"{kind} D={dim} case {case}: {err:.2e}"
    assert time.monotonic() - started < 30.0


def test_criterion_02_logdet_matches_numerical_jacobian():
    started = time.monotonic()
    rng = np.random.default_rng(1002)
    h = 1e-5
    for kind in ("nice", "realnvp", "maf"):
        low = 1 if kind == "maf" else 2
        for case in range(50):
            dim = int(rng.integers(low, 5))
            ctx_dim = int(rng.choice([0, 2]))
            config = FlowConfig(
                kind=kind,
                dim=dim,
                context_dim=ctx_dim,
                num_layers=int(rng.choice([1, 2])),
                hidden_features=4,
            )
            model = build_flow(config, seed=case)
            jitter(model.params, seed=3000 + case)
            y = rng.normal(0.0, 1.0, size=dim)
            ctx = rng.normal(size=ctx_dim) if ctx_dim else None
            _, logdet = model.forward(y, ctx)
            jac = np.zeros((dim, dim))
            for j in range(dim):
                up, down = y.copy(), y.copy()
                up[j] += h
                down[j] -= h
                z_up, _ = model.forward(up, ctx)
                z_down, _ = model.forward(down, ctx)
                jac[:, j] = (z_up - z_down) / (2.0 * h)
            _, numeric = np.linalg.slogdet(jac)
            assert abs(logdet - numeric) < 1e-4, (
                f"{kind} D={dim} case {case}: {abs(logdet - numeric):.2e}"
            )
    assert time.monotonic() - started < 60.0


def test_criterion_03_gradients_match_finite_differences():
    started = time.monotonic()
    rng = np.random.default_rng(1003)
    y = rng.normal(0.0, 0.8, size=(8, 2))
    ctx = rng.normal(size=(8, 2))

    for kind in ("nice", "realnvp", "maf"):
        config = FlowConfig(kind=kind, dim=2, context_dim=2,
                            num_layers=1, blocks_per_layer=1, hidden_features=4)
        model = build_flow(config, seed=10)
        jitter(model.params, seed=4000)
        worst = finite_diff_check(
            lambda: nll_graph(model, y, ctx), model.params
        )
        assert worst < 1e-4, f"{kind}: {worst:.2e}"

    gmm = build_gmm(GmmConfig(dim=2, context_dim=2, components=2, hidden=(4,)),
                    seed=11)
    jitter(gmm.params, seed=4001)
    worst = finite_diff_check(lambda: nll_graph(gmm, y, ctx), gmm.params)
    assert worst < 1e-4, f"gmm: {worst:.2e}"

    head = build_head(HeadConfig(in_features=3, dim=1, task="classification",
                                 hidden=(4,)), seed=12)
    jitter(head.params, seed=4002)
    x = rng.normal(size=(8, 3))
    targets = rng.integers(0, 2, size=(8, 1)).astype(np.float64)
    worst = finite_diff_check(
        lambda: head.loss_graph(x, targets, mode="eval"), head.params
    )
    assert worst < 1e-4, f"head: {worst:.2e}"

    # Trainable profile and density in one store: the loss must reach both.
    config = TrainConfig(
        family="maf", num_layers=1, blocks_per_layer=1, hidden_features=4,
        personalization=PersonalizationConfig(kind="medium", embed_dim=3),
    )
    registry = AnnotatorRegistry(["a0", "a1", "a2", "a3"])
    model = build_model(config, label_dim=1, embed_dim=2, registry=registry)
    jitter(model.params, seed=4003)
    labels = rng.normal(0.5, 0.2, size=(8, 1))
    emb = rng.normal(size=(8, 2))
    aidx = rng.integers(0, 5, size=8)
    worst = finite_diff_check(
        lambda: nll_loss_graph(model, labels, emb, aidx, mode="eval"),
        model.params,
    )
    assert worst < 1e-4, f"end-to-end: {worst:.2e}"
    assert time.monotonic() - started < 120.0


def nll_graph(density, y, ctx):
    from annoflow.compute import tensor as T

    return T.tmean(density.log_prob_graph(y, ctx, mode="eval")) * -1.0


def quadrature_model(family, dim, seed):
    base = TrainConfig(
        learning_rate=5e-3, max_epochs=15, patience=5, batch_size=64,
        num_layers=2, hidden_features=8, components=3, dequantize=True,
    )
    scfg = SynthConfig(num_texts=60, num_annotators=8, dim=dim, embed_dim=4,
                       annotations_per_text=5, seed=400 + seed)
    dataset = normalize_labels(synth_generate(scfg), dequantize=True, seed=seed)
    dataset = split_folds(dataset, k=5, mode="text", seed=seed)
    config = config_with(base, {"family": family, "seed": seed})
    model = model_for_dataset(config, dataset)
    model, _ = train_model(model, dataset, fold_round(dataset, 0), config)
    return model, dataset.text_matrix([0])[0]


def test_criterion_04_trained_densities_integrate_to_one():
    started = time.monotonic()
    for family in ("maf", "gmm"):
        model, ctx = quadrature_model(family, 1, 1)
        grid = np.arange(-8.0, 8.0, 0.01)
        lp = model.log_prob(grid[:, None], np.tile(ctx, (grid.size, 1)))
        mass = np.trapezoid(np.exp(lp), grid)
        assert 0.98 <= mass <= 1.02, f"{family} D=1: {mass:.4f}"
    # Coupling flows need two dimensions, so D=1 covers maf and gmm only.
    for family in ("nice", "realnvp", "maf", "gmm"):
        model, ctx = quadrature_model(family, 2, 2)
        g = np.arange(-5.0, 6.0, 0.02)
        xx, yy = np.meshgrid(g, g)
        pts = np.column_stack([xx.ravel(), yy.ravel()])
        lp = model.log_prob(pts, np.tile(ctx, (pts.shape[0], 1)))
        density = np.exp(lp).reshape(xx.shape)
        mass = np.trapezoid(np.trapezoid(density, g, axis=1), g)
        assert 0.98 <= mass <= 1.02, f"{family} D=2: {mass:.4f}"
    assert time.monotonic() - started < 120.0


def test_criterion_05_recovers_gaussian_entropy():
    started = time.monotonic()
    rng = np.random.default_rng(11)
    labels = rng.normal(0.5, 0.1, size=(3000, 1))
    dataset = split_folds(plain_dataset(labels), k=10, mode="text", seed=0)
    config = TrainConfig(family="maf", learning_rate=5e-3, max_epochs=60,
                         patience=8, num_layers=2, hidden_features=8, seed=0)
    model = model_for_dataset(config, dataset)
    model, report = train_model(model, dataset, fold_round(dataset, 0), config)
    assert abs(report.test_nll - (-0.9184)) < 0.1, f"NLL {report.test_nll:.4f}"
    assert time.monotonic() - started < 180.0


def test_criterion_06_flow_beats_single_component_gmm():
    started = time.monotonic()
    base = TrainConfig(learning_rate=5e-3, max_epochs=60, patience=8,
                       num_layers=3, hidden_features=16, components=1)
    gaps = []
    for seed in (0, 1, 2):
        rng = np.random.default_rng(100 + seed)
        which = rng.integers(0, 2, size=1500)
        centers = np.where(which[:, None] == 0, 0.2, 0.8)
        labels = centers + rng.normal(0.0, 0.05, size=(1500, 2))
        dataset = split_folds(plain_dataset(labels), k=10, mode="text",
                              seed=seed)
        round_ = fold_round(dataset, 0)
        nll = {}
        for family in ("realnvp", "gmm"):
            config = config_with(base, {"family": family, "seed": seed})
            model = model_for_dataset(config, dataset)
            model, report = train_model(model, dataset, round_, config)
            nll[family] = report.test_nll
        gaps.append(nll["gmm"] - nll["realnvp"])
    assert np.mean(gaps) >= 0.2, f"gaps {[f'{g:.3f}' for g in gaps]}"
    assert time.monotonic() - started < 300.0


def test_criterion_07_personalization_beats_text_only():
    started = time.monotonic()
    base = TrainConfig(
        family="maf", learning_rate=5e-3, max_epochs=25, patience=6,
        num_layers=2, hidden_features=8, dequantize=True,
        personalization=PersonalizationConfig(embed_dim=8),
    )
    nll = {"none": [], "onehot": [], "medium": []}
    for seed in (0, 1, 2):
        scfg = SynthConfig(
            num_texts=50, num_annotators=10, dim=1, embed_dim=8,
            num_groups=2, group_offsets=(-0.25, 0.25), bias_std=0.05,
            annotations_per_text=5, seed=200 + seed,
        )
        dataset = normalize_labels(synth_generate(scfg), dequantize=True,
                                   seed=seed)
        dataset = split_folds(dataset, k=10, mode="text", seed=seed)
        config = config_with(base, {"seed": seed})
        result = run_experiment(dataset, ["maf"],
                                ["none", "onehot", "medium"], config)
        for row in sorted(result.rows,
                          key=lambda r: (r["personalization"], r["fold"])):
            nll[row["personalization"]].append(row["test_nll"])
    baseline = np.array(nll["none"])
    for kind in ("onehot", "medium"):
        personalized = np.array(nll[kind])
        gap = float(np.mean(baseline - personalized))
        verdict = paired_ttest_bonferroni(baseline, personalized, m=2)
        assert gap >= 0.1, f"{kind}: gap {gap:.3f}"
        assert verdict["p_adjusted"] < 0.05, f"{kind}: p {verdict['p_adjusted']:.3g}"
    assert time.monotonic() - started < 600.0


def constant_label_dataset(n, dim, value, schema, seed):
    rng = np.random.default_rng(seed)
    texts = [f"t{i:05d}" for i in range(n)]
    embeddings = {t: rng.normal(size=4) for t in texts}
    return AnnotationDataset(texts, ["a0"] * n, np.full((n, dim), value),
                             schema, embeddings)


def test_criterion_08_discretization_recovers_trained_target():
    started = time.monotonic()
    config = TrainConfig(family="maf", learning_rate=1e-2, max_epochs=80,
                         patience=12, batch_size=32, num_layers=2,
                         hidden_features=8, dequantize=True, seed=0)

    dataset = constant_label_dataset(240, 2, 1.0, binary_schema(2), 31)
    dataset = normalize_labels(dataset, dequantize=True, seed=0)
    dataset = split_folds(dataset, k=10, mode="text", seed=0)
    round_ = fold_round(dataset, 0)
    model = model_for_dataset(config, dataset)
    model, _ = train_model(model, dataset, round_, config)
    for i in round_.test_idx:
        decision = discretize_binary(model,
                                     dataset.embeddings[dataset.text_ids[i]])
        assert np.all(decision.classes == 1), f"record {i}: {decision.classes}"

    dataset = constant_label_dataset(240, 1, 0.5, ordinal_schema(1), 32)
    dataset = normalize_labels(dataset, dequantize=True, seed=0)
    dataset = split_folds(dataset, k=10, mode="text", seed=0)
    round_ = fold_round(dataset, 0)
    model = model_for_dataset(config, dataset)
    model, _ = train_model(model, dataset, round_, config)
    middle = sum(
        np.isclose(
            discretize_regression(
                model, dataset.embeddings[dataset.text_ids[i]],
                dataset.schema, seed=5,
            ).values[0],
            0.5,
        )
        for i in round_.test_idx
    )
    assert middle >= 0.95 * round_.test_idx.size, (
        f"{middle}/{round_.test_idx.size}"
    )
    assert time.monotonic() - started < 300.0


def disagreement_dataset(num_texts, num_annotators, per_text, seed):
    """Binary labels thresholded on a nonlinear text score per annotator group."""
    rng = np.random.default_rng(seed)
    texts = [f"t{i:05d}" for i in range(num_texts)]
    annotators = [f"a{i:04d}" for i in range(num_annotators)]
    embeddings = {t: rng.normal(size=4) for t in texts}
    score = {
        t: 1.0 / (1.0 + np.exp(-2.0 * (e[0] * e[1] + e[2] * e[3])))
        for t, e in embeddings.items()
    }
    thresholds = np.where(np.arange(num_annotators) % 2 == 0, 0.35, 0.65)
    thresholds = thresholds + rng.normal(0.0, 0.03, size=num_annotators)
    text_ids, annot_ids, labels = [], [], []
    for t in texts:
        for a in rng.choice(num_annotators, size=per_text, replace=False):
            y = 1.0 if score[t] > thresholds[a] else 0.0
            if rng.random() < 0.02:
                y = 1.0 - y
            text_ids.append(t)
            annot_ids.append(annotators[a])
            labels.append([y])
    return AnnotationDataset(text_ids, annot_ids, np.array(labels),
                             binary_schema(1), embeddings)


def test_criterion_09_hybrid_head_beats_deterministic_head():
    started = time.monotonic()
    flow_config = TrainConfig(
        family="maf", learning_rate=1e-2, max_epochs=80, patience=10,
        batch_size=64, num_layers=2, hidden_features=8, dequantize=True,
        personalization=PersonalizationConfig(kind="onehot"),
    )
    head_config = config_with(flow_config, {"max_epochs": 10, "patience": 10})
    wins = 0
    for seed in (0, 1, 2):
        dataset = disagreement_dataset(150, 24, 8, 300 + seed)
        dataset = normalize_labels(dataset, dequantize=True, seed=seed)
        dataset = split_folds(dataset, k=5, mode="text", seed=seed)
        round_ = fold_round(dataset, 0)
        cfg = config_with(flow_config, {"seed": seed})
        hcfg = config_with(head_config, {"seed": seed})
        model = model_for_dataset(cfg, dataset)
        model, _ = train_model(model, dataset, round_, cfg)
        features = hybrid_feature_table(model, dataset)
        det, _ = train_deterministic(model, dataset, round_, hcfg,
                                     head_hidden=(8,))
        hyb, _ = train_hybrid(model, dataset, round_, hcfg, features,
                              head_hidden=(8,))
        truth = (dataset.label_matrix(round_.test_idx) > 0.5).astype(float)
        f_det = macro_f1(
            truth, det.predict(head_inputs(model, dataset, round_.test_idx))
        )
        f_hyb = macro_f1(
            truth,
            hyb.predict(head_inputs(model, dataset, round_.test_idx,
                                    features[round_.test_idx])),
        )
        assert f_hyb >= f_det - 0.01, f"seed {seed}: {f_hyb:.3f} vs {f_det:.3f}"
        wins += int(f_hyb > f_det)
    assert wins >= 2, f"hybrid strictly better in only {wins} of 3 seeds"
    assert time.monotonic() - started < 600.0


def test_criterion_10_metric_oracles():
    started = time.monotonic()
    y_true = np.array([[0.0], [0.0], [1.0], [1.0]])
    y_pred = np.array([[0.0], [1.0], [1.0], [1.0]])
    assert abs(macro_f1(y_true, y_pred) - 11.0 / 15.0) < 1e-9

    truth = np.array([[1.0], [2.0], [3.0]])
    pred = np.array([[1.0], [2.0], [4.0]])
    assert abs(r_squared(truth, pred) - 0.5) < 1e-9

    labels = np.array([[0.0]] * 7 + [[1.0]] * 3)
    expected = -0.7 * np.log2(0.7) - 0.3 * np.log2(0.3)
    assert abs(annotation_entropy(labels, binary_schema(1)) - expected) < 1e-9

    verdict = paired_ttest_bonferroni(
        np.array([1.0, 2.0, 3.0]), np.zeros(3), m=1
    )
    assert abs(verdict["t"] - 2.0 * np.sqrt(3.0)) < 1e-9
    assert verdict["df"] == 2
    assert abs(verdict["p_raw"] - 0.0742) < 1e-3
    assert time.monotonic() - started < 5.0


def test_criterion_11_cli_runs_are_deterministic(tmp_path):
    started = time.monotonic()
    outputs = []
    for attempt in ("first", "second"):
        root = tmp_path / attempt
        code = cli_main([
            "synth", "--out", str(root / "data"), "--seed", "5",
            "--set", "synth.num_texts=24",
            "--set", "synth.num_annotators=6",
            "--set", "synth.embed_dim=4",
            "--set", "synth.annotations_per_text=4",
        ])
        assert code == 0
        code = cli_main([
            "train", "--out", str(root / "run"), "--seed", "5",
            "--annotations", str(root / "data" / "annotations.jsonl"),
            "--embeddings", str(root / "data" / "embeddings.jsonl"),
            "--schema", str(root / "data" / "schema.json"),
            "--folds", "3", "--no-figures",
            "--set", "train.max_epochs=3",
            "--set", "train.hidden_features=4",
            "--set", "train.num_layers=1",
        ])
        assert code == 0
        outputs.append(root)
    first, second = outputs
    for name in ("model.json", "train_report.json"):
        assert (first / "run" / name).read_bytes() == \
            (second / "run" / name).read_bytes(), f"{name} differs"
    with open(first / "run" / "train_report.json") as fh:
        report = json.load(fh)
    assert report["epochs"] == 3
    assert time.monotonic() - started < 180.0
