import numpy as np
import pytest

from flame.federation import FedConfig, run_centralized
from flame.model import (PAPER_PROFILE, AttentionAccumulator, AttentionStats,
                         KeypointTransformer, ModelConfig, block_summary, count_parameters,
                         extract_attention_stats, forward, group_sizes, init_params,
                         param_groups, param_shapes)

TINY = ModelConfig(seq_len=4, n_keypoints=5, d_model=8, n_heads=2, layers_spatial=2,
                   layers_temporal=1, dropout=0.0, dtype="float64")


def batch(cfg, b=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (b, cfg.seq_len, cfg.n_keypoints, 2)), rng.integers(0, cfg.n_classes, b)


# -- config and schema ------------------------------------------------------------


@pytest.mark.parametrize("kwargs, msg", [
    (dict(d_model=10, n_heads=4), "divisible"),
    (dict(layers_spatial=0), "layers_spatial"),
    (dict(dropout=1.0), "dropout"),
    (dict(dtype="float16"), "dtype"),
])
def test_config_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        ModelConfig(**kwargs)


def test_pos_spatial_rows_are_keypoint_indexed():
    shapes = param_shapes(PAPER_PROFILE)
    assert shapes["pos_spatial"] == (17, 64)
    assert shapes["pos_temporal"] == (45, 64)
    assert list(shapes)[0] == "input_embed.weight" and list(shapes)[-1] == "head.bias"


def test_weight_and_bias_share_a_group():
    groups = param_groups(TINY)
    assert groups["spatial.1.attn_q"] == ["spatial.1.attn_q.weight", "spatial.1.attn_q.bias"]
    assert groups["pos_spatial"] == ["pos_spatial"]
    assert sum(len(v) for v in groups.values()) == len(param_shapes(TINY))


# -- parameter counts ---------------------------------------------------------


def block_formula(d, mult=4):
    attention = 4 * (d * d + d)
    norms = 2 * 2 * d
    ffn = d * mult * d + mult * d + mult * d * d + d
    return attention + norms + ffn


def test_small_group_counts():
    per_group, _ = count_parameters(init_params(PAPER_PROFILE))
    assert per_group["input_embed"] == 2 * 64 + 64 == 192
    assert per_group["pos_spatial"] == 17 * 64 == 1088
    assert per_group["pos_temporal"] == 45 * 64
    assert per_group["head"] == 64 * 4 + 4


def test_paper_profile_total():
    per_group, total = count_parameters(init_params(PAPER_PROFILE))
    blocks = block_summary(per_group)
    assert blocks["spatial.0"] == block_formula(64) == 49_984
    expected = 192 + 1088 + 45 * 64 + 260 + 6 * block_formula(64)
    assert total == expected == 304_324
    assert 300_000 <= total <= 350_000
    assert sum(group_sizes(PAPER_PROFILE).values()) == total


def test_two_plus_two_falls_short_of_profile_range():
    cfg = ModelConfig()
    assert sum(group_sizes(cfg).values()) == 192 + 1088 + 2880 + 260 + 4 * 49_984


def test_init_is_seeded_and_typed():
    a, b = init_params(TINY, 4), init_params(TINY, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(v.dtype == np.float64 for v in a.values())
    assert not np.array_equal(a["pos_spatial"], init_params(TINY, 5)["pos_spatial"])
    assert (a["spatial.0.ln1.gamma"] == 1).all() and (a["head.bias"] == 0).all()


# -- forward pass ---------------------------------------------------------------


def test_zero_model_outputs_head_bias():
    params = {k: np.zeros_like(v) for k, v in init_params(TINY).items()}
    params["head.bias"] = np.array([0.5, -1.0, 2.0, 0.25])
    logits, _ = forward(np.zeros((3,) + (TINY.seq_len, TINY.n_keypoints, 2)), params, TINY)
    np.testing.assert_array_equal(logits, np.tile(params["head.bias"], (3, 1)))


def test_output_shape_and_stats_normalized():
    x, _ = batch(TINY, 5)
    logits, stats = KeypointTransformer(TINY, seed=1).forward(x)
    assert logits.shape == (5, TINY.n_classes)
    assert abs(stats.keypoint_importance.sum() - 1) <= 1e-6
    assert abs(stats.time_importance.sum() - 1) <= 1e-6
    assert stats.keypoint_importance.shape == (TINY.n_keypoints,)
    assert stats.time_importance.shape == (TINY.seq_len,)
    assert stats.samples_seen == 5


def test_identical_keypoints_get_identical_importance():
    params = init_params(TINY, 2)
    params["pos_spatial"] = np.zeros_like(params["pos_spatial"])
    x = np.full((2, TINY.seq_len, TINY.n_keypoints, 2), 0.4)
    _, stats = forward(x, params, TINY)
    np.testing.assert_allclose(stats.keypoint_importance, 1 / TINY.n_keypoints, atol=1e-12)


def test_permuting_keypoints_with_their_embeddings_keeps_logits():
    x, _ = batch(TINY, 4, seed=3)
    params = init_params(TINY, 3)
    perm = np.random.default_rng(0).permutation(TINY.n_keypoints)
    moved = dict(params, pos_spatial=params["pos_spatial"][perm])
    a, sa = forward(x, params, TINY)
    b, sb = forward(x[:, :, perm], moved, TINY)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    np.testing.assert_allclose(sa.keypoint_importance[perm], sb.keypoint_importance, atol=1e-12)


def test_wrong_input_shape():
    with pytest.raises(ValueError, match="expected input"):
        KeypointTransformer(TINY).forward(np.zeros((1, TINY.seq_len, 3, 2)))


def test_backward_before_forward():
    with pytest.raises(RuntimeError, match="before forward"):
        KeypointTransformer(TINY).backward(np.zeros((1, 4)))


def test_every_group_receives_gradient():
    x, y = batch(TINY, 6, seed=7)
    _, grads, _ = KeypointTransformer(TINY, seed=7).loss_and_grads(x, y)
    norms = {}
    for name, g in grads.items():
        group = name.rsplit(".", 1)[0] if name.endswith(("weight", "bias", "gamma", "beta")) else name
        norms[group] = norms.get(group, 0.0) + float((g * g).sum())
    assert set(norms) == set(param_groups(TINY))
    assert all(v > 0 for v in norms.values()), [k for k, v in norms.items() if v == 0]


def test_seeded_forward_is_reproducible():
    cfg = ModelConfig(seq_len=4, n_keypoints=5, d_model=8, n_heads=2,
                      layers_spatial=1, layers_temporal=1, dropout=0.3)
    x, y = batch(cfg, 4)
    runs = []
    for _ in range(2):
        loss, grads, _ = KeypointTransformer(cfg, seed=9).loss_and_grads(
            x, y, np.random.default_rng(1))
        runs.append((loss, grads))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_eval_mode_ignores_dropout():
    cfg = ModelConfig(seq_len=4, n_keypoints=5, d_model=8, n_heads=2,
                      layers_spatial=1, layers_temporal=1, dropout=0.5)
    x, _ = batch(cfg)
    m = KeypointTransformer(cfg, seed=0)
    np.testing.assert_array_equal(m.forward(x)[0], m.forward(x)[0])


# -- attention statistics --------------------------------------------------------


def stats_of(kp, tm, n):
    return AttentionStats(np.asarray(kp, float), np.asarray(tm, float), n)


def test_accumulator_single_and_repeated_pass():
    s = stats_of([0.2, 0.3, 0.5], [0.6, 0.4], 4)
    acc = AttentionAccumulator()
    acc.update(s)
    one = extract_attention_stats(acc)
    np.testing.assert_allclose(one.keypoint_importance, s.keypoint_importance, atol=1e-15)
    acc.update(s)
    two = acc.result()
    np.testing.assert_allclose(two.keypoint_importance, s.keypoint_importance, atol=1e-15)
    np.testing.assert_allclose(two.time_importance, s.time_importance, atol=1e-15)
    assert two.samples_seen == 8


def test_accumulator_weights_by_samples():
    acc = AttentionAccumulator()
    acc.update(stats_of([1.0, 0.0], [1.0], 3))
    acc.update(stats_of([0.0, 1.0], [1.0], 1))
    np.testing.assert_allclose(acc.result().keypoint_importance, [0.75, 0.25])


def test_accumulator_empty_and_reset():
    acc = AttentionAccumulator()
    with pytest.raises(ValueError):
        acc.result()
    acc.update(stats_of([0.5, 0.5], [1.0], 2))
    acc.reset()
    with pytest.raises(ValueError):
        acc.result()


def test_stats_csv(tmp_path):
    s = stats_of([0.25, 0.75], [1.0], 1)
    s.write_csv(tmp_path / "k.csv", tmp_path / "t.csv")
    assert (tmp_path / "k.csv").read_text().splitlines() == [
        "keypoint_index,importance", "0,0.25", "1,0.75"]
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "frame_index,importance"


@pytest.mark.slow
def test_training_shifts_attention_to_the_only_moving_keypoint():
    cfg = ModelConfig(seq_len=8, n_keypoints=17, d_model=16, n_heads=2, layers_spatial=1,
                      layers_temporal=1, dropout=0.0, dtype="float64")
    rng = np.random.default_rng(0)
    n = 400
    y = rng.integers(0, 4, n)
    X = np.broadcast_to(rng.uniform(0.2, 0.8, (17, 2)), (n, 8, 17, 2)).copy()
    X += rng.normal(0, 0.01, X.shape)
    # class c drags the hip along direction c * 90 degrees; everything else is noise
    t = np.linspace(0, 1, 8)
    angle = np.pi / 2 * y
    X[:, :, 11, 0] += 0.3 * np.cos(angle)[:, None] * t
    X[:, :, 11, 1] += 0.3 * np.sin(angle)[:, None] * t

    state = run_centralized((X, y), cfg, 15, FedConfig(seed=0, lr=3e-3))
    model = KeypointTransformer(cfg, state.params)
    assert (model.predict(X) == y).mean() > 0.9
    _, stats = model.forward(X)
    assert stats.keypoint_importance[11] > np.median(stats.keypoint_importance)
