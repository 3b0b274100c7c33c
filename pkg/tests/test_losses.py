import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothsep import autodiff as ad
from smoothsep import losses, nets, rng

from conftest import assert_grad_close, finite_difference


def linearized_mlp(classes=2, seed=5):
    """MLP bundle with shrunk weights and positive biases so probe
    inputs stay on the positive side of every hidden unit, making the
    network locally linear-softmax with unsaturated outputs."""
    cfg = nets.NetConfig(kind="mlp", classes=classes, d_proj=8,
                         mlp_hidden=(16, 16, 16))
    bundle = nets.build_model(cfg, seed)
    for name, tensor in bundle.params.items():
        if name.startswith("fc") and name.endswith(".w"):
            tensor.data = tensor.data * 0.1
        if name.startswith("fc") and name.endswith(".b"):
            tensor.data = tensor.data + 1.0
    return bundle


# ---------------------------------------------------------------------------
# discrepancy


def test_dice_identity_on_one_hot_masks():
    a = losses.one_hot(np.array([[0, 1, 1, 0]]), 2)
    d = losses.discrepancy(a, a, "dice", smooth=0.0)
    assert abs(d.item()) < 1e-7


def test_dice_hand_value_single_class():
    a = np.array([[1.0, 1.0, 0.0, 0.0]])[:, None, :]   # class axis 1, C=1
    b = np.array([[1.0, 0.0, 0.0, 0.0]])[:, None, :]
    d = losses.discrepancy(a, b, "dice", smooth=0.0)
    assert d.item() == pytest.approx(1.0 / 3.0, abs=1e-7)


def test_kl_self_discrepancy_zero(gen):
    logits = gen.standard_normal((3, 4, 5)).astype(np.float32)
    p = ad.softmax(ad.Tensor(logits), axis=1).data
    assert losses.discrepancy(p, p, "kl").item() == pytest.approx(0.0, abs=1e-6)


def test_kl_rejects_non_distribution():
    bad = np.full((2, 3), 0.5, dtype=np.float32)
    with pytest.raises(losses.NotADistribution):
        losses.discrepancy(bad, bad, "kl")


def test_discrepancy_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        losses.discrepancy(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), "dice")


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_dice_symmetric_and_bounded(seed):
    gen = np.random.default_rng(seed)
    a = gen.random((2, 3, 4)).astype(np.float32)
    b = gen.random((2, 3, 4)).astype(np.float32)
    d_ab = losses.discrepancy(a, b, "dice").item()
    d_ba = losses.discrepancy(b, a, "dice").item()
    assert d_ab == pytest.approx(d_ba, abs=1e-7)
    assert -1e-7 <= d_ab <= 1.0 + 1e-7


def test_kl_nonnegative(gen):
    a = ad.softmax(ad.Tensor(gen.standard_normal((4, 3))), axis=1).data
    b = ad.softmax(ad.Tensor(gen.standard_normal((4, 3))), axis=1).data
    assert losses.discrepancy(a, b, "kl").item() >= -1e-7


def test_dice_gradient_matches_finite_differences(gen):
    a = ad.Tensor(gen.random((2, 3, 4)), requires_grad=True, dtype=np.float64)
    b = ad.Tensor(gen.random((2, 3, 4)), dtype=np.float64)

    def loss():
        return losses.discrepancy(a, b, "dice")

    (g,) = ad.gradients(loss(), [a])
    assert_grad_close(g.data, finite_difference(loss, a))


# ---------------------------------------------------------------------------
# adversarial noise and the smoothness loss


def test_adversarial_noise_zero_epsilon_is_exactly_zero():
    bundle = linearized_mlp()
    x = np.random.default_rng(0).standard_normal((4, 2)).astype(np.float32)
    cfg = losses.AdvConfig(epsilon=0.0)
    noise = losses.adversarial_noise(bundle, x, cfg, rng.stream(0, "n"))
    assert not noise.r_adv.any()
    assert not noise.any_zero


@pytest.mark.parametrize("kind", ["dice", "kl"])
def test_adversarial_noise_norm_equals_epsilon(kind):
    bundle = linearized_mlp()
    x = np.random.default_rng(1).standard_normal((5, 2)).astype(np.float32)
    cfg = losses.AdvConfig(epsilon=10.0, discrepancy_kind=kind)
    noise = losses.adversarial_noise(bundle, x, cfg, rng.stream(1, "n"))
    norms = np.sqrt((noise.r_adv.reshape(5, -1) ** 2).sum(axis=1))
    assert not noise.any_zero
    np.testing.assert_allclose(norms, 10.0, rtol=1e-5)


def test_adversarial_direction_beats_random_directions():
    bundle = linearized_mlp()
    gen = np.random.default_rng(7)
    x = gen.standard_normal((4, 2)).astype(np.float32)
    cfg = losses.AdvConfig(epsilon=0.5, xi=0.05)
    noise = losses.adversarial_noise(bundle, x, cfg, rng.stream(2, "n"))
    with ad.no_grad():
        adv_d = losses.lds_loss(bundle, x, noise, "dice").item()
        wins = 0
        for k in range(100):
            r = gen.standard_normal(x.shape).astype(np.float32)
            r, _ = losses._scale_per_sample(r, cfg.epsilon)
            if adv_d > losses.lds_loss(bundle, x, r, "dice").item():
                wins += 1
    assert wins >= 95, f"adversarial direction won only {wins}/100"


def test_lds_zero_noise_dice_floor():
    bundle = linearized_mlp()
    x = np.random.default_rng(3).standard_normal((3, 2)).astype(np.float32)
    with ad.no_grad():
        p = losses._probs(bundle, ad.Tensor(x)).data
    got = losses.lds_loss(bundle, x, np.zeros_like(x), "dice").item()
    # identical inputs reduce the per-class term to 1 - sum(a^2)/sum(a)
    per_class = [1.0 - (p[:, c] ** 2).sum() / (2 * p[:, c].sum() + 1e-5) * 2
                 for c in range(p.shape[1])]
    assert got == pytest.approx(float(np.mean(per_class)), abs=1e-6)


def test_lds_zero_noise_kl_is_zero():
    bundle = linearized_mlp()
    x = np.random.default_rng(4).standard_normal((3, 2)).astype(np.float32)
    assert losses.lds_loss(bundle, x, np.zeros_like(x), "kl").item() == \
        pytest.approx(0.0, abs=1e-6)


def test_lds_pseudo_label_branch_carries_no_gradient():
    bundle = linearized_mlp()
    x_t = ad.Tensor(np.random.default_rng(5).standard_normal((3, 2)),
                    requires_grad=True)
    with ad.no_grad():
        pseudo = losses._probs(bundle, x_t).data
    loss = losses.lds_loss(bundle, x_t, np.zeros((3, 2), dtype=np.float32),
                           "dice", pseudo_probs=pseudo)
    grads, flags = ad.gradients(loss, [x_t], with_detached_flags=True)
    assert flags == [True]
    np.testing.assert_array_equal(grads[0].data, 0.0)


def test_lds_gradients_reach_parameters():
    bundle = linearized_mlp()
    x = np.random.default_rng(6).standard_normal((3, 2)).astype(np.float32)
    loss = losses.lds_loss(bundle, x, np.full((3, 2), 0.1, np.float32), "dice")
    grads = ad.gradients(loss, [bundle.params["fc1.w"]])
    assert np.abs(grads[0].data).max() > 0


# ---------------------------------------------------------------------------
# prototype selection


def select_oracle(labels, probs, scores, k, threshold):
    """Plain-python re-statement of the selection rule."""
    per_class = {}
    for c in sorted(set(labels.tolist())):
        cand = [i for i in range(len(labels))
                if labels[i] == c and probs[i].max() > threshold
                and int(probs[i].argmax()) == labels[i]]
        ranked = sorted(cand, key=lambda i: (-scores[i], i))
        per_class[c] = ranked[:k]
    return per_class


def test_select_prototypes_spec_example():
    cfg = nets.NetConfig(kind="mlp", classes=2, d_proj=4)
    bundle = nets.build_model(cfg, 0)
    feats = ad.Tensor(np.eye(3, 4, dtype=np.float32))
    labels = np.zeros(3, dtype=np.int64)
    probs = np.array([[0.95, 0.05], [0.85, 0.15], [0.99, 0.01]],
                     dtype=np.float32)
    bank = losses.select_prototypes(bundle, feats, labels, probs,
                                    k=2, threshold=0.9)
    assert sorted(bank.indices[0].tolist()) == [0, 2]
    assert bank.vectors[0].shape == (2, 4)
    assert bank.weights[0].data.sum() == pytest.approx(1.0, abs=1e-6)


def test_select_prototypes_empty_class():
    cfg = nets.NetConfig(kind="mlp", classes=2, d_proj=4)
    bundle = nets.build_model(cfg, 0)
    feats = ad.Tensor(np.ones((2, 4), dtype=np.float32))
    labels = np.array([0, 0])
    probs = np.array([[0.6, 0.4], [0.55, 0.45]], dtype=np.float32)
    bank = losses.select_prototypes(bundle, feats, labels, probs,
                                    k=4, threshold=0.9)
    assert bank.classes() == []


def test_select_prototypes_keeps_all_when_k_large(gen):
    cfg = nets.NetConfig(kind="mlp", classes=2, d_proj=4)
    bundle = nets.build_model(cfg, 3)
    feats = ad.Tensor(gen.standard_normal((6, 4)).astype(np.float32))
    labels = np.array([0, 0, 0, 1, 1, 1])
    probs = losses.one_hot(labels, 2) * 0.98 + 0.01
    bank = losses.select_prototypes(bundle, feats, labels, probs.T
                                    if probs.ndim != 2 else probs,
                                    k=10, threshold=0.5)
    assert bank.vectors[0].shape[0] == 3
    assert bank.vectors[1].shape[0] == 3
    with ad.no_grad():
        scores0 = nets.attention_scores(
            bundle, "z", 0, ad.take(feats, [0, 1, 2])).data
    assert list(bank.indices[0]) == sorted(
        range(3), key=lambda i: (-scores0[i], i))


def test_select_prototypes_matches_enumeration_oracle():
    cfg = nets.NetConfig(kind="mlp", classes=3, d_proj=6)
    bundle = nets.build_model(cfg, 9)
    for seed in range(30):
        gen = np.random.default_rng(seed)
        n = int(gen.integers(1, 40))
        feats_np = gen.standard_normal((n, 6)).astype(np.float32)
        labels = gen.integers(0, 3, n)
        probs = np.random.default_rng(seed + 1).dirichlet(
            np.ones(3), size=n).astype(np.float32)
        k = int(gen.integers(1, 6))
        threshold = float(gen.uniform(0.2, 0.95))
        feats = ad.Tensor(feats_np)
        bank = losses.select_prototypes(bundle, feats, labels, probs,
                                        k=k, threshold=threshold)
        with ad.no_grad():
            all_scores = np.concatenate(
                [nets.attention_scores(bundle, "z", c, feats).data[:, None]
                 for c in range(3)], axis=1)
        scores_by_label = all_scores[np.arange(n), labels]
        want = select_oracle(labels, probs, scores_by_label, k, threshold)
        for c in range(3):
            got = bank.indices.get(c, np.array([], dtype=int)).tolist()
            assert got == want.get(c, []), f"seed {seed} class {c}"


# ---------------------------------------------------------------------------
# class-separation loss


def uniform_attention_bundle(classes=2, d_proj=4):
    """Zero attention heads give every feature the same weight."""
    cfg = nets.NetConfig(kind="mlp", classes=classes, d_proj=d_proj)
    bundle = nets.build_model(cfg, 2)
    for name, t in bundle.params.items():
        if name.startswith("att_"):
            t.data = np.zeros_like(t.data)
    return bundle


def hand_bank(vectors, weights):
    bank = losses.PrototypeBank(k=8, threshold=0.0)
    for c, (v, w) in enumerate(zip(vectors, weights)):
        if v is None:
            continue
        bank.vectors[c] = ad.Tensor(np.asarray(v, dtype=np.float32))
        bank.weights[c] = ad.Tensor(np.asarray(w, dtype=np.float32))
        bank.indices[c] = np.arange(len(w))
    return bank


def test_cs_loss_zero_when_features_coincide_with_prototype():
    bundle = uniform_attention_bundle()
    z = np.array([[1.0, 2.0, 0.0, -1.0]])
    bank = hand_bank([z], [[1.0]])
    feats = ad.Tensor(np.repeat(z, 5, axis=0).astype(np.float32))
    out = losses.cs_loss(bundle, bank, feats, np.zeros(5, dtype=np.int64))
    assert abs(out.item()) <= 1e-6


def test_cs_loss_orthogonal_pair_is_one():
    bundle = uniform_attention_bundle()
    bank = hand_bank([np.array([[1.0, 0.0, 0.0, 0.0]])], [[1.0]])
    feats = ad.Tensor(np.array([[0.0, 1.0, 0.0, 0.0]], dtype=np.float32))
    out = losses.cs_loss(bundle, bank, feats, np.zeros(1, dtype=np.int64))
    assert out.item() == pytest.approx(1.0, abs=1e-6)


def test_cs_loss_matches_hand_summation():
    bundle = uniform_attention_bundle()
    z = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    w_z = np.array([0.25, 0.75])
    f = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 2.0, 0.0]])
    bank = hand_bank([z], [w_z])
    feats = ad.Tensor(f.astype(np.float32))
    got = losses.cs_loss(bundle, bank, feats, np.zeros(2, dtype=np.int64))

    w_f = [0.5, 0.5]        # zeroed attention -> equal scores, L1 normalized
    total = 0.0
    for i in range(2):
        for j in range(2):
            cos = np.dot(z[i], f[j]) / (np.linalg.norm(z[i])
                                        * np.linalg.norm(f[j]))
            total += w_z[i] * w_f[j] * (1.0 - cos)
    expected = total / (2 * 2)      # one class -> class mean is the term
    assert got.item() == pytest.approx(expected, abs=1e-6)


def test_cs_loss_skips_classes_without_prototypes_or_features():
    bundle = uniform_attention_bundle(classes=3)
    z = np.array([[1.0, 0.0, 0.0, 0.0]])
    bank = hand_bank([z, None, z], [[1.0], None, [1.0]])
    feats = ad.Tensor(np.array([[0.0, 1.0, 0.0, 0.0]], dtype=np.float32))
    # class 0 has a feature; class 2 has prototypes but no features
    out = losses.cs_loss(bundle, bank, feats, np.zeros(1, dtype=np.int64))
    assert out.item() == pytest.approx(1.0, abs=1e-6)
    # nothing matches at all -> zero
    empty = losses.cs_loss(bundle, bank, feats,
                           np.full(1, 1, dtype=np.int64))
    assert empty.item() == 0.0


def test_cs_loss_zero_vector_rejected():
    bundle = uniform_attention_bundle()
    bank = hand_bank([np.array([[1.0, 0.0, 0.0, 0.0]])], [[1.0]])
    feats = ad.Tensor(np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(losses.ZeroVector):
        losses.cs_loss(bundle, bank, feats, np.zeros(1, dtype=np.int64))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_cs_loss_range(seed):
    gen = np.random.default_rng(seed)
    bundle = uniform_attention_bundle()
    z = gen.standard_normal((3, 4)) + 0.1
    w_z = gen.random(3) + 0.1
    w_z = w_z / w_z.sum()
    bank = hand_bank([z], [w_z])
    feats = ad.Tensor((gen.standard_normal((5, 4)) + 0.1).astype(np.float32))
    out = losses.cs_loss(bundle, bank, feats, np.zeros(5, dtype=np.int64))
    assert -1e-6 <= out.item() <= 2.0 + 1e-6


def test_cs_loss_subsampling_is_deterministic(gen):
    bundle = uniform_attention_bundle()
    z = gen.standard_normal((2, 4)) + 0.2
    bank = hand_bank([z], [[0.5, 0.5]])
    feats = ad.Tensor((gen.standard_normal((50, 4)) + 0.2).astype(np.float32))
    labels = np.zeros(50, dtype=np.int64)
    a = losses.cs_loss(bundle, bank, feats, labels,
                       rng.stream(3, "cs"), feature_cap=10).item()
    b = losses.cs_loss(bundle, bank, feats, labels,
                       rng.stream(3, "cs"), feature_cap=10).item()
    assert a == b


# ---------------------------------------------------------------------------
# ramp-up and the total objective


def test_rampup_at_zero():
    cfg = losses.RampUp(lambda_max_lds=2.0, lambda_max_cs=1.0, t_ramp=100)
    assert losses.rampup_weight(0, cfg, "lds") == \
        pytest.approx(2.0 * math.exp(-5.0), rel=1e-9)


def test_rampup_plateau_exact():
    cfg = losses.RampUp(lambda_max_lds=0.7, lambda_max_cs=0.3, t_ramp=50)
    assert losses.rampup_weight(50, cfg, "lds") == 0.7
    assert losses.rampup_weight(51, cfg, "cs") == 0.3
    assert losses.rampup_weight(10 ** 9, cfg, "lds") == 0.7


@given(st.integers(0, 500))
@settings(max_examples=60, deadline=None)
def test_rampup_nondecreasing(t):
    cfg = losses.RampUp(t_ramp=200)
    assert losses.rampup_weight(t + 1, cfg, "lds") >= \
        losses.rampup_weight(t, cfg, "lds") - 1e-12


def test_rampup_shared_schedule_shape():
    cfg = losses.RampUp(lambda_max_lds=3.0, lambda_max_cs=0.5, t_ramp=77)
    for t in (0, 10, 40, 76, 77, 200):
        lds = losses.rampup_weight(t, cfg, "lds") / 3.0
        cs = losses.rampup_weight(t, cfg, "cs") / 0.5
        assert lds == pytest.approx(cs, rel=1e-12)


def test_total_loss_reduces_to_seg_at_zero_weights():
    seg = ad.Tensor(0.37)
    total = losses.total_loss(seg, ad.Tensor(9.0), ad.Tensor(9.0), 0.0, 0.0)
    assert total.item() == pytest.approx(0.37, rel=1e-6)


def test_total_loss_weighted_sums():
    seg, lds, cs = (ad.Tensor(v) for v in (0.5, 0.2, 0.1))
    assert losses.total_loss(seg, lds, cs, 1.0, 1.0).item() == \
        pytest.approx(0.8, rel=1e-6)
    assert losses.total_loss(seg, lds, cs, 0.5, 2.0).item() == \
        pytest.approx(0.8, rel=1e-6)
