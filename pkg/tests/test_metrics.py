import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from metric_fixtures import (
    absorption_sae,
    absorption_set,
    class_oracle_sae,
    class_set,
    relu_sae,
    scr_oracle_sae,
    scr_set,
)

from sae_forge.errors import NumericError
from sae_forge.metrics import (
    METRIC_NAMES,
    EvalSet,
    MetricError,
    MetricReport,
    ProbeTrainConfig,
    absorption_free_score,
    auc,
    explained_variance,
    fit_probe,
    ood_probing,
    scr_score,
    sparse_probing_score,
    split_mask,
    tpp_score,
)
from sae_forge.synthgen import SHIFT_PRESETS, GeneratorConfig, build_model, generate_rows, shift_distribution

# ---------------------------------------------------------------- probe


def test_probe_separable_1d():
    x = np.linspace(-1, 1, 400)
    x = x[x != 0]
    probe = fit_probe(x, x > 0)
    assert probe.heldout_accuracy == 1.0


def test_probe_on_noise_is_chance():
    g = np.random.default_rng(9)
    x = g.standard_normal((2000, 5))
    y = g.random(2000) < 0.5
    assert 0.45 <= fit_probe(x, y).heldout_accuracy <= 0.55


def test_probe_recovers_bayes_direction():
    g = np.random.default_rng(1)
    mu = np.array([1.0, 0.0])
    y = g.random(4000) < 0.5
    x = np.where(y[:, None], mu, -mu) + g.standard_normal((4000, 2))
    assert fit_probe(x, y).direction @ mu >= 0.95


def test_probe_errors():
    with pytest.raises(MetricError):
        fit_probe(np.zeros((10, 2)), np.ones(10, bool))
    with pytest.raises(NumericError):
        fit_probe(np.array([[np.inf], [0.0]]), [True, False], ProbeTrainConfig(train_fraction=1.0))


def test_probe_is_deterministic():
    g = np.random.default_rng(3)
    x = g.standard_normal((500, 4))
    y = x[:, 0] + 0.5 * g.standard_normal(500) > 0
    a, b = fit_probe(x, y), fit_probe(x, y)
    assert a.weights.tobytes() == b.weights.tobytes() and a.bias == b.bias


def test_split_mask():
    m = split_mask(10, 0.8, 0)
    assert m.sum() == 8
    np.testing.assert_array_equal(m, split_mask(10, 0.8, 0))


# ---------------------------------------------------------------- AUC / EV


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])


def brute_auc(s, y):
    pos, neg = s[y], s[~y]
    return np.mean([(p > q) + 0.5 * (p == q) for p in pos for q in neg])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=4, max_size=40), st.integers(0, 2**31))
def test_auc_matches_pairs_and_is_rank_invariant(raw, seed):
    s = np.array(raw, dtype=float)
    y = np.random.default_rng(seed).random(len(s)) < 0.5
    if y.all() or not y.any():
        y[0] = not y[0]
    a = auc(s, y)
    assert a == pytest.approx(brute_auc(s, y), abs=1e-12)
    assert auc(np.exp(s / 3.0) * 7 - 2, y) == a
    assert auc(s**3, y) == a


def test_explained_variance_edges():
    x = np.random.default_rng(0).standard_normal((50, 4))
    assert explained_variance(x, x) == 100.0
    assert explained_variance(x, np.tile(x.mean(0), (50, 1))) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(MetricError):
        explained_variance(np.ones((5, 2)), np.ones((5, 2)))


def test_explained_variance_two_pass_oracle():
    x = np.random.default_rng(2).standard_normal((300, 6))
    xh = 0.5 * x
    mean = [sum(x[i, j] for i in range(300)) / 300 for j in range(6)]
    tot = sum((x[i, j] - mean[j]) ** 2 for i in range(300) for j in range(6))
    res = sum((x[i, j] - xh[i, j]) ** 2 for i in range(300) for j in range(6))
    assert explained_variance(x, xh) == pytest.approx(100 * (1 - res / tot), abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-2, 2))
def test_explained_variance_at_most_100(seed, scale):
    g = np.random.default_rng(seed)
    x = g.standard_normal((20, 3))
    xh = scale * x + g.standard_normal((20, 3)) * 0.1
    assert explained_variance(x, xh) <= 100.0


# ---------------------------------------------------------------- sparse probing


def _concept_set(seed=0, n=1000):
    g = np.random.default_rng(seed)
    y = g.random(n) < 0.4
    x = g.standard_normal((n, 3)) * 0.3
    x[:, 0] += y
    return EvalSet(x, y, split_mask(n, 0.8, 0), ["c"])


def test_sparse_probing_perfect_latent():
    data = _concept_set()
    y = data.labels[:, 0].astype(float)
    # latent 1 is exactly the concept indicator: ReLU(2 * indicator - 1) on a helper coordinate
    x = np.column_stack([data.x, y])
    data = EvalSet(x, data.labels, data.is_train)
    e = np.eye(4)
    sae = relu_sae(np.stack([e[1], e[3], e[2]]), np.zeros(3), np.stack([e[1], e[3], e[2]]).T)
    score, per = sparse_probing_score(sae, data, k_list=(1,))
    assert score == 100.0


def test_sparse_probing_zero_codes_is_majority():
    data = _concept_set()
    sae = relu_sae(np.zeros((4, 3)), -np.ones(4), np.eye(3, 4))
    score, _ = sparse_probing_score(sae, data)
    te = data.labels[~data.is_train, 0]
    assert score == pytest.approx(100 * max(te.mean(), 1 - te.mean()), abs=1e-9)


def test_sparse_probing_needs_both_latents():
    g = np.random.default_rng(4)
    n = 3000
    u = g.random((n, 2))
    y = u.sum(axis=1) + 0.05 * g.standard_normal(n) > 1.0
    data = EvalSet(u, y, split_mask(n, 0.8, 1))
    sae = relu_sae(np.eye(2), np.zeros(2), np.eye(2))
    s1, _ = sparse_probing_score(sae, data, k_list=(1,))
    s2, _ = sparse_probing_score(sae, data, k_list=(2,))
    assert s2 >= s1 and s2 > 90


def test_sparse_probing_permuted_labels_is_near_majority():
    model, h = build_model()
    b = generate_rows(model, h, 0, "perm", 4000, 64)
    labels = b.labels[np.random.default_rng(0).permutation(4000)]
    data = EvalSet(b.x, labels, split_mask(4000, 0.8, 0))
    sae = relu_sae(h.directions, np.zeros(h.n_features), h.directions.T)
    score, per = sparse_probing_score(sae, data, concepts=range(8))
    te = labels[~data.is_train, :8]
    majority = 100 * np.mean(np.maximum(te.mean(0), 1 - te.mean(0)))
    assert abs(score - majority) < 1.5


# ---------------------------------------------------------------- absorption


def test_absorption_dedicated_latent_is_100():
    score, per = absorption_free_score(absorption_sae(), absorption_set(0), [0])
    assert score == 100.0
    assert per["parent"]["main_latents"] == [0]


def test_absorption_all_absorbed_is_0():
    score, per = absorption_free_score(absorption_sae(), absorption_set(100), [0])
    assert abs(score - 0.0) <= 1e-9
    assert per["parent"]["rate"] == 1.0


def test_absorption_forty_of_hundred_is_60():
    score, _ = absorption_free_score(absorption_sae(), absorption_set(40), [0])
    assert abs(score - 60.0) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_absorption_in_range(n_abs, tau_main, tau_abs):
    from sae_forge.metrics import AbsorptionConfig

    cfg = AbsorptionConfig(tau_main=tau_main, tau_abs=tau_abs)
    score, _ = absorption_free_score(absorption_sae(), absorption_set(n_abs), [0], cfg)
    assert 0.0 <= score <= 100.0


def test_absorption_unrepresented_direction_errors():
    sae = relu_sae(np.zeros((2, 4)), -np.ones(2), np.eye(4, 2))
    with pytest.raises(MetricError):
        absorption_free_score(sae, absorption_set(0), [0])


# ---------------------------------------------------------------- TPP / SCR


def test_tpp_noop_is_zero():
    score, _ = tpp_score(class_oracle_sae(), class_set(), [0, 1, 2], k_tpp=0)
    assert score == 0.0


def test_tpp_oracle_construction():
    score, terms = tpp_score(class_oracle_sae(), class_set(), [0, 1, 2], k_tpp=1)
    for t in terms.values():
        assert t["targeted"] > 0.20
        assert abs(t["off_target"]) < 0.05
    # golden value of this construction
    assert score == pytest.approx(29.9537037037037, abs=1e-9)


def test_tpp_misattribution_is_worse():
    sae, data = class_oracle_sae(), class_set()
    good, _ = tpp_score(sae, data, [0, 1, 2], k_tpp=1)
    bad, _ = tpp_score(sae, data, [0, 1, 2], k_tpp=1, attribute_from={0: 1, 1: 2, 2: 0})
    assert bad <= good


def test_tpp_needs_two_classes():
    data = class_set()
    with pytest.raises(MetricError):
        tpp_score(class_oracle_sae(), data, [0], k_tpp=1)


def test_scr_noop_is_zero():
    score, _ = scr_score(scr_oracle_sae(), scr_set(), k_scr=0)
    assert score == 0.0


def test_scr_oracle_construction():
    score, diag = scr_score(scr_oracle_sae(), scr_set(), k_scr=2)
    assert sorted(diag["latents"]) == [2, 3]
    assert score > 0
    assert score == pytest.approx(100.0, abs=1e-9)  # golden: ablation restores the oracle accuracy


def test_scr_wrong_target_is_not_positive():
    score, _ = scr_score(scr_oracle_sae(), scr_set(), k_scr=2, ablate_concept="a")
    assert score <= 0


def test_scr_without_bias_errors():
    s = scr_set()
    s.x_biased = s.x_balanced
    s.a_biased = s.a_balanced
    with pytest.raises(MetricError):
        scr_score(scr_oracle_sae(), s, k_scr=2)


# ---------------------------------------------------------------- OOD


@pytest.fixture(scope="module")
def toy():
    model, h = build_model(GeneratorConfig())
    b = generate_rows(model, h, 11, "ood-id", 4000, 64)
    ev = EvalSet(b.x, b.labels, split_mask(4000, 0.8, 0))
    return model, h, ev


def _random_sae(h, seed=0, m=64):
    g = np.random.default_rng(seed)
    W = g.standard_normal((m, h.directions.shape[1])) / 8
    return relu_sae(W, np.zeros(m), W.T)


def test_ood_identity_shift_matches_in_distribution(toy):
    model, h, ev = toy
    same = generate_rows(model, h, 11, "ood-same", 4000, 64)
    shifted = {"identity": EvalSet(same.x, same.labels, np.zeros(4000, bool))}
    sae = _random_sae(h)
    for arm in (None, sae):
        mean, _ = ood_probing(arm, ev, shifted, [0, 1, 2])
        te = ~ev.is_train
        feats = ev.x if arm is None else arm.codes(ev.x)
        in_auc = []
        for c in (0, 1, 2):
            probe = fit_probe(
                feats[ev.is_train], ev.labels[ev.is_train, c], ProbeTrainConfig(train_fraction=1.0)
            )
            in_auc.append(auc(probe.decision(feats[te]), ev.labels[te, c]))
        assert abs(mean - np.mean(in_auc)) <= 0.02


def test_ood_oracle_survives_magnitude_shift(toy):
    model, h, ev = toy
    m2, h2 = shift_distribution(model, h, SHIFT_PRESETS["magnitude_up"])
    b = generate_rows(m2, h2, 11, "ood-mag", 4000, 64)
    mean, per = ood_probing(None, ev, {"mag": EvalSet(b.x, b.labels, np.zeros(4000, bool))}, range(8))
    assert mean >= 0.99


def test_ood_zero_codes_is_half(toy):
    model, h, ev = toy
    sae = relu_sae(np.zeros((4, 64)), -np.ones(4), np.eye(64, 4))
    b = generate_rows(model, h, 11, "ood-z", 1000, 64)
    mean, _ = ood_probing(sae, ev, {"z": EvalSet(b.x, b.labels, np.zeros(1000, bool))}, [0, 1])
    assert mean == 0.5


def test_ood_permuted_labels_near_half(toy):
    model, h, ev = toy
    g = np.random.default_rng(0)
    perm = EvalSet(ev.x, ev.labels[g.permutation(4000)], ev.is_train)
    b = generate_rows(model, h, 11, "ood-p", 4000, 64)
    mean, _ = ood_probing(None, perm, {"s": EvalSet(b.x, b.labels, np.zeros(4000, bool))}, range(8))
    assert abs(mean - 0.5) <= 0.05


def test_ood_needs_shifts(toy):
    with pytest.raises(MetricError):
        ood_probing(None, toy[2], {}, [0])


def test_report_shape():
    r = MetricReport({"tpp": 1.0}, failures={"scr": "x"})
    d = r.as_dict()
    assert list(d["metrics"]) == list(METRIC_NAMES)
    assert d["metrics"]["absorption_free"] is None
