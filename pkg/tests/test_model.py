import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mirec.data import Interactions, PopularityTable
from mirec.model import (
    LossConfig,
    MapperTooLarge,
    MetaMapper,
    ModelConfig,
    Scorer,
    TwoTowerParams,
    corrected_score,
    flatten_final,
    full_catalog_probabilities,
    joint_loss,
    meta_map,
    mirec_scorer,
    predict_mirec,
    score,
    softmax_batch_loss,
)
from mirec.evaluation import rank_among
from mirec.numeric import ShapeError, central_difference, relative_error, zero_grads

from conftest import tiny_features, tiny_theta


def tower_by_hand(tower, x):
    """Dense feature row -> embedding using explicit loops over fields and units."""
    h = []
    for f in tower.layout:
        seg = x[f.offset : f.offset + f.width]
        if f.kind == "continuous":
            h.extend(float(v) for v in seg)
            continue
        table = tower.embeddings[f.name].values
        for d in range(table.shape[1]):
            h.append(sum(seg[r] * table[r, d] for r in range(f.width)))
    last = len(tower.mlp.layers) - 1
    for n, (w, b) in enumerate(tower.mlp.layers):
        out = []
        for j in range(w.shape[1]):
            z = b.values[j] + sum(h[i] * w.values[i, j] for i in range(len(h)))
            out.append(z if n == last else max(0.0, z))
        h = out
    return np.array(h)


def randomize_biases(theta, rng, scale=0.3):
    for blk in theta.blocks():
        if blk.name.endswith("bias"):
            blk.values[...] = rng.normal(scale=scale, size=blk.shape)


def batch_of(rng, n_users, n_items, n):
    return Interactions(rng.integers(0, n_users, n), rng.integers(0, n_items, n), np.ones(n, dtype=np.int64))


def uniform_pop(n_items):
    return PopularityTable({i: 1 for i in range(n_items)})


# ---------------------------------------------------------------- scoring


def test_score_matches_hand_evaluation(features):
    theta = tiny_theta(features, seed=5)
    randomize_biases(theta, np.random.default_rng(0))
    xu, yi = features.user_vector(2), features.item_vector(3)
    want = float(tower_by_hand(theta.user, xu) @ tower_by_hand(theta.item, yi))
    assert abs(score(theta, xu, yi) - want) < 1e-12


def _set_output(theta, user_vec, item_vec):
    # zero every hidden weight, drive the output with the final bias only
    for tower, vec in ((theta.user, user_vec), (theta.item, item_vec)):
        w, b = tower.final
        w.values[...] = 0
        b.values[...] = vec


def test_orthogonal_and_unit_scores(features):
    theta = tiny_theta(features)
    _set_output(theta, [1, 0, 0, 0], [0, 1, 0, 0])
    assert score(theta, features.user_vector(0), features.item_vector(0)) == 0.0
    e = np.array([0.6, 0.8, 0, 0])
    _set_output(theta, e, e)
    assert abs(score(theta, features.user_vector(0), features.item_vector(0)) - 1.0) < 1e-15


def test_layout_mismatch_is_construction_error(features):
    a = tiny_theta(features)
    b = tiny_theta(features, cfg=ModelConfig(embedding_dim=6, hidden_layers=1, field_dim=3))
    with pytest.raises(ShapeError):
        TwoTowerParams(a.user, b.item)


def test_corrected_score_examples():
    assert corrected_score(1.7, 0.2, 0.0) == 1.7
    assert abs(corrected_score(2.0, 0.01, 1.0) - (-2.6052)) < 1e-4
    assert corrected_score(3.25, 1.0, 0.7) == 3.25
    with pytest.raises(ValueError):
        corrected_score(1.0, 0.0, 1.0)


@settings(max_examples=100)
@given(st.floats(-10, 10), st.floats(0.01, 5), st.floats(1e-6, 0.5), st.floats(1.01, 2), st.floats(0.01, 3))
def test_corrected_score_strictly_increasing(s, ds, p, ratio, lam):
    assert corrected_score(s, p, lam) < corrected_score(s + ds, p, lam)
    assert corrected_score(s, p, lam) < corrected_score(s, p * ratio, lam)


# ---------------------------------------------------------------- softmax loss


def test_single_item_full_catalog_loss_is_zero():
    f = tiny_features(3, 1)
    theta = tiny_theta(f)
    batch = Interactions([0, 1], [0, 0], [1, 1])
    tape = softmax_batch_loss(theta, batch, f, PopularityTable({0: 2}), LossConfig(), "full_catalog")
    assert tape.loss == 0.0


def test_equal_logits_give_ln2(features):
    theta = tiny_theta(features)
    _set_output(theta, np.zeros(4), np.zeros(4))
    batch = Interactions([0, 1], [2, 5], [1, 1])
    tape = softmax_batch_loss(theta, batch, features, uniform_pop(8), LossConfig(use_logq=False), "in_batch")
    assert abs(tape.loss - math.log(2)) < 1e-15


def test_degenerate_batch_logs_warning(features, caplog):
    theta = tiny_theta(features)
    tape = softmax_batch_loss(theta, Interactions([0, 1], [3, 3], [1, 1]), features, uniform_pop(8), LossConfig())
    assert tape.loss == 0.0 and "degenerate" in caplog.text


def brute_force_softmax_loss(theta, batch, features, probs, lam, use_logq):
    """Full-catalog softmax evaluated row by row with Python floats."""
    V = [tower_by_hand(theta.item, features.item_vector(i)) for i in range(features.item_matrix.shape[0])]
    total = 0.0
    for u, i in zip(batch.user_ids, batch.item_ids):
        x = tower_by_hand(theta.user, features.user_vector(u))
        logits = [float(x @ v) + (lam * math.log(probs[j]) if use_logq else 0.0) for j, v in enumerate(V)]
        m = max(logits)
        total -= logits[i] - (m + math.log(sum(math.exp(l - m) for l in logits)))
    return total / len(batch)


@pytest.mark.parametrize("use_logq", [False, True])
def test_in_batch_equals_full_catalog_when_batch_covers_catalog(use_logq):
    rng = np.random.default_rng(1)
    f = tiny_features(5, 7)
    theta = tiny_theta(f, seed=2)
    items = np.concatenate([np.arange(7), rng.integers(0, 7, 5)])
    batch = Interactions(rng.integers(0, 5, len(items)), items, np.ones(len(items), dtype=np.int64))
    pop = PopularityTable({i: int(c) for i, c in enumerate(rng.integers(1, 9, 7))})
    cfg = LossConfig(lambda_logq=0.8, use_logq=use_logq)
    a = softmax_batch_loss(theta, batch, f, pop, cfg, "in_batch").loss
    b = softmax_batch_loss(theta, batch, f, pop, cfg, "full_catalog").loss
    oracle = brute_force_softmax_loss(theta, batch, f, pop.as_array(7), 0.8, use_logq)
    assert abs(a - b) < 1e-9 and abs(b - oracle) < 1e-9


def test_backward_runs_once(features):
    theta = tiny_theta(features)
    tape = softmax_batch_loss(theta, batch_of(np.random.default_rng(0), 6, 8, 5), features, uniform_pop(8), LossConfig())
    tape.backward()
    with pytest.raises(RuntimeError):
        tape.backward()


def check_gradients(blocks, build, tol=1e-4):
    """Analytic gradients from ``build().backward()`` vs central differences of ``build().loss``."""
    zero_grads(blocks)
    build().backward()
    worst = 0.0
    for blk in blocks:
        analytic = blk.grad.copy()
        numeric = central_difference(lambda: build().loss, blk.values, h=1e-5)
        worst = max(worst, relative_error(analytic, numeric))
    zero_grads(blocks)
    assert worst < tol, worst
    return worst


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("mode", ["in_batch", "full_catalog"])
def test_softmax_loss_gradients(seed, mode):
    rng = np.random.default_rng(seed)
    f = tiny_features(4, 6, seed, dense=True)
    theta = tiny_theta(f, seed)
    randomize_biases(theta, rng)
    batch = batch_of(rng, 4, 6, 7)
    pop = PopularityTable({i: int(rng.integers(1, 5)) for i in range(6)})
    cfg = LossConfig(lambda_logq=float(rng.uniform(0.2, 1.5)), use_logq=bool(seed % 2))
    weights = rng.uniform(0.5, 2.0, len(batch))
    check_gradients(theta.blocks(), lambda: softmax_batch_loss(theta, batch, f, pop, cfg, mode, weights))


# ---------------------------------------------------------------- meta-mapper


def test_identity_mapper_is_exact(features):
    theta = tiny_theta(features, seed=3)
    for scope in ("flat", "per_unit"):
        mapped = meta_map(theta, MetaMapper.identity(theta, scope))
        for side in ("user", "item"):
            a, b = mapped.tower(side).final, theta.tower(side).final
            assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].values, b[1].values)


def test_mapping_leaves_other_blocks_shared(features):
    theta = tiny_theta(features)
    mapped = meta_map(theta, MetaMapper.identity(theta))
    for tower, orig in ((mapped.user, theta.user), (mapped.item, theta.item)):
        assert tower.mlp.layers[0][0] is orig.mlp.layers[0][0]
        assert tower.final[0] is not orig.final[0]


def test_constant_mapper(features):
    theta = tiny_theta(features)
    other = tiny_theta(features, seed=9)
    w = MetaMapper.identity(theta)
    rng = np.random.default_rng(0)
    for side in ("user", "item"):
        w.weights[side].values[...] = 0
        w.biases[side].values[...] = rng.normal(size=w.biases[side].shape)
    for src in (theta, other):
        mapped = meta_map(src, w)
        for side in ("user", "item"):
            assert np.array_equal(flatten_final(mapped.tower(side)), w.biases[side].values)


@pytest.mark.parametrize("scope", ["flat", "per_unit"])
def test_random_mapper_matches_matrix_vector_oracle(features, scope):
    theta = tiny_theta(features, seed=4)
    w = MetaMapper.identity(theta, scope)
    rng = np.random.default_rng(1)
    for blk in w.blocks():
        blk.values[...] = rng.normal(size=blk.shape)
    mapped = meta_map(theta, w)
    for side in ("user", "item"):
        W, b = theta.tower(side).final
        M, c = w.weights[side].values, w.biases[side].values
        n_in, n_out = W.shape
        if scope == "flat":
            v = list(W.values.ravel()) + list(b.values)
            u = [c[r] + sum(M[r, j] * v[j] for j in range(len(v))) for r in range(len(v))]
            want_w, want_b = np.array(u[: n_in * n_out]).reshape(n_in, n_out), np.array(u[n_in * n_out :])
        else:
            want_w, want_b = np.zeros_like(W.values), np.zeros(n_out)
            for unit in range(n_out):
                v = list(W.values[:, unit]) + [b.values[unit]]
                u = [c[r] + sum(M[r, j] * v[j] for j in range(len(v))) for r in range(len(v))]
                want_w[:, unit], want_b[unit] = u[:n_in], u[n_in]
        got_w, got_b = mapped.tower(side).final
        np.testing.assert_allclose(got_w.values, want_w, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(got_b.values, want_b, rtol=1e-12, atol=1e-12)


def test_oversized_flat_mapper_refused(features):
    theta = tiny_theta(features, 0, ModelConfig(embedding_dim=64, hidden_layers=1, field_dim=4))
    with pytest.raises(MapperTooLarge, match="per_unit"):
        MetaMapper.identity(theta, "flat")
    assert MetaMapper.identity(theta, "per_unit").input_dim("item") == 129


def test_mapper_dimension_mismatch(features):
    theta = tiny_theta(features)
    other = tiny_theta(features, cfg=ModelConfig(embedding_dim=2, hidden_layers=1, field_dim=3))
    with pytest.raises(ShapeError):
        meta_map(other, MetaMapper.identity(theta))


# ---------------------------------------------------------------- joint loss


def _joint_setup(seed, scope="flat"):
    rng = np.random.default_rng(seed)
    f = tiny_features(4, 6, seed, dense=True)
    few = tiny_theta(f, seed)
    star = tiny_theta(f, seed + 100)
    randomize_biases(few, rng)
    w = MetaMapper.identity(few, scope)
    for blk in w.blocks():
        blk.values[...] += rng.normal(scale=0.1, size=blk.shape)
    batch = batch_of(rng, 4, 6, 6)
    pop = PopularityTable({i: int(rng.integers(1, 5)) for i in range(6)})
    return f, few, star, w, batch, pop


def test_perfect_mapping_leaves_only_regulariser():
    f, few, star, _, batch, pop = _joint_setup(0)
    star_final = {s: flatten_final(star.tower(s)) for s in ("user", "item")}
    w = MetaMapper.identity(few)
    for side in ("user", "item"):
        w.weights[side].values[...] = 0
        w.biases[side].values[...] = star_final[side]
    cfg = LossConfig(lambda_reg=0.3)
    tape = joint_loss(w, few, star, batch, f, pop, cfg)
    assert tape.distance == 0.0
    assert tape.loss == 0.3 * softmax_batch_loss(few, batch, f, pop, cfg).loss


def test_zero_lambda_is_pure_distance():
    f, few, star, w, batch, pop = _joint_setup(1)
    other = Interactions([0, 1, 2], [5, 4, 3], [1, 1, 1])
    cfg = LossConfig(lambda_reg=0.0)
    a = joint_loss(w, few, star, batch, f, pop, cfg).loss
    b = joint_loss(w, few, star, other, f, pop, cfg).loss
    assert a == b > 0


@pytest.mark.parametrize("scope", ["flat", "per_unit"])
def test_joint_loss_component_oracle(scope):
    f, few, star, w, batch, pop = _joint_setup(2, scope)
    cfg = LossConfig(lambda_reg=0.25, lambda_logq=0.5)
    mapped = meta_map(few, w)
    dist = sum(
        float(np.sum((flatten_final(mapped.tower(s)) - flatten_final(star.tower(s))) ** 2)) for s in ("user", "item")
    )
    base = brute_force_in_batch(few, batch, f, pop.as_array(6), 0.5)
    assert abs(joint_loss(w, few, star, batch, f, pop, cfg).loss - (dist + 0.25 * base)) < 1e-9


def brute_force_in_batch(theta, batch, features, probs, lam):
    cand = sorted(set(batch.item_ids.tolist()))
    V = {i: tower_by_hand(theta.item, features.item_vector(i)) for i in cand}
    total = 0.0
    for u, i in zip(batch.user_ids, batch.item_ids):
        x = tower_by_hand(theta.user, features.user_vector(u))
        logits = {j: float(x @ V[j]) + lam * math.log(probs[j]) for j in cand}
        m = max(logits.values())
        total -= logits[i] - (m + math.log(sum(math.exp(l - m) for l in logits.values())))
    return total / len(batch)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("scope", ["flat", "per_unit"])
def test_joint_loss_gradients(seed, scope):
    f, few, star, w, batch, pop = _joint_setup(seed, scope)
    cfg = LossConfig(lambda_reg=0.7, lambda_logq=1.0)
    blocks = few.blocks() + w.blocks()
    for base_on in ("few", "mapped"):
        check_gradients(blocks, lambda: joint_loss(w, few, star, batch, f, pop, cfg, base_on))
    for blk in star.blocks():
        assert not blk.grad.any()


def test_joint_loss_on_mapped_parameters():
    f, few, star, w, batch, pop = _joint_setup(1, "per_unit")
    cfg = LossConfig(lambda_reg=0.7)
    tape = joint_loss(w, few, star, batch, f, pop, cfg, "mapped")
    want = softmax_batch_loss(meta_map(few, w), batch, f, pop, cfg, "in_batch").loss
    assert tape.base_loss == want
    identity = joint_loss(MetaMapper.identity(few, "per_unit"), few, star, batch, f, pop, cfg, "mapped")
    assert identity.base_loss == joint_loss(w, few, star, batch, f, pop, cfg).base_loss
    with pytest.raises(ValueError):
        joint_loss(w, few, star, batch, f, pop, cfg, "other")


# ---------------------------------------------------------------- prediction


def test_predict_boundaries(features):
    star = tiny_theta(features, 1)
    few = tiny_theta(features, 2)
    w = MetaMapper.identity(few)
    for blk in w.blocks():
        blk.values[...] += 0.05
    xu, yi = features.user_vector(1), features.item_vector(4)
    assert predict_mirec(xu, yi, star, few, w, 1.0) == score(star, xu, yi)
    assert predict_mirec(xu, yi, star, few, w, 0.0) == score(meta_map(few, w), xu, yi)


def test_predict_midpoint_arithmetic(features):
    star = tiny_theta(features, 1)
    _set_output(star, [2.0, 0, 0, 0], [1.0, 0, 0, 0])
    few = tiny_theta(features, 2)
    _set_output(few, [4.0, 0, 0, 0], [1.0, 0, 0, 0])
    w = MetaMapper.identity(few)
    assert predict_mirec(features.user_vector(0), features.item_vector(0), star, few, w, 0.5) == 3.0


def test_scorer_boundaries_are_bit_identical(features):
    star = tiny_theta(features, 1)
    few = tiny_theta(features, 2)
    w = MetaMapper.identity(few)
    for blk in w.blocks():
        blk.values[...] *= 1.1
    users = np.arange(6)
    one = mirec_scorer(star, few, w, 1.0).precompute(features).score_rows(users)
    assert one.tobytes() == Scorer.single(star).precompute(features).score_rows(users).tobytes()
    zero = mirec_scorer(star, few, w, 0.0).precompute(features).score_rows(users)
    assert zero.tobytes() == Scorer.single(meta_map(few, w)).precompute(features).score_rows(users).tobytes()


def test_mixture_embeddings_reproduce_scores(features):
    a, b = tiny_theta(features, 1), tiny_theta(features, 2)
    s = Scorer([(0.3, a), (0.7, b)]).precompute(features)
    V = s.item_embeddings(features)
    U = np.concatenate([math.sqrt(0.3) * a.user.embed(features.user_matrix),
                        math.sqrt(0.7) * b.user.embed(features.user_matrix)], axis=1)
    np.testing.assert_allclose(U @ V.T, s.score_rows(np.arange(6)), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-64, 64), min_size=6, max_size=6), st.integers(0, 5))
def test_mirec_ranking_invariant_to_per_user_constant(offsets, test_item):
    f = tiny_features(6, 6)
    star, few = tiny_theta(f, 1), tiny_theta(f, 2)
    scores = mirec_scorer(star, few, MetaMapper.identity(few), 0.5).precompute(f).score_rows(np.arange(6))
    scores = np.round(scores * 64) / 64  # dyadic values keep the shifted sums exact
    cand = np.arange(6)
    for u, c in enumerate(offsets):
        assert rank_among(scores[u], cand, test_item) == rank_among(scores[u] + c, cand, test_item)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_pred=1.5)
    with pytest.raises(ValueError):
        LossConfig(lambda_reg=-1)
    with pytest.raises(ValueError):
        LossConfig(lambda_logq=float("nan"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_full_catalog_probabilities_sum_to_one(seed, use_logq):
    rng = np.random.default_rng(seed)
    f = tiny_features(5, 9, seed % 7)
    theta = tiny_theta(f, seed)
    pop = PopularityTable({i: int(rng.integers(1, 50)) for i in range(9)})
    probs = full_catalog_probabilities(theta, np.arange(5), f, pop, LossConfig(use_logq=use_logq))
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-9)
