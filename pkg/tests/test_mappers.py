import numpy as np
import pytest

from viewtoken.mappers import (
    DegenerateTokenError,
    LEAKY_SLOPE,
    LN_EPS,
    MapperConfig,
    TokenMapper,
    init_mapper,
    parameter_count,
    predict_scene_token,
    predict_view_token,
)


# ---------------------------------------------------------------------------
# Hand-rolled forward-pass oracle: explicit matrix arithmetic, no shared code
# with the implementation.
# ---------------------------------------------------------------------------


def oracle_forward(params: dict, config: MapperConfig, x: np.ndarray) -> np.ndarray:
    h = np.array(x, dtype=float)
    for b in range(config.blocks):
        a = params[f"block{b}.weight"].dot(h) + params[f"block{b}.bias"]
        mean = sum(a) / len(a)
        var = sum((ai - mean) ** 2 for ai in a) / len(a)
        normed = [(ai - mean) / np.sqrt(var + LN_EPS) for ai in a]
        ln = [g * n + bb for g, n, bb in zip(params[f"block{b}.ln_gain"], normed, params[f"block{b}.ln_bias"])]
        h = np.array([v if v > 0 else LEAKY_SLOPE * v for v in ln])
    return params["head.weight"].dot(h) + params["head.bias"]


def oracle_norm_scale(raw: np.ndarray, target: float) -> np.ndarray:
    return raw * target / np.sqrt(sum(r * r for r in raw))


@pytest.fixture()
def view_mapper():
    return init_mapper(MapperConfig(embed_dim=32), seed=13)


@pytest.fixture()
def scene_mapper():
    return init_mapper(MapperConfig(embed_dim=32, bypass=True), seed=17)


def test_parameter_count_formula():
    cfg = MapperConfig(embed_dim=768, input_dim=64, hidden_dim=64, blocks=2)
    d = 768
    expected = 2 * (64 * 64 + 64 + 2 * 64) + 64 * d + d
    assert parameter_count(cfg) == expected
    cfg_b = MapperConfig(embed_dim=768, bypass=True)
    expected_b = 2 * (64 * 64 + 64 + 2 * 64) + 64 * 2 * d + 2 * d
    assert parameter_count(cfg_b) == expected_b


def test_parameter_count_matches_actual(view_mapper, scene_mapper):
    for mapper in (view_mapper, scene_mapper):
        assert parameter_count(mapper.config) == sum(v.size for v in mapper.params.values())


def test_doubling_embed_dim_adds_65d():
    base = parameter_count(MapperConfig(embed_dim=100))
    doubled = parameter_count(MapperConfig(embed_dim=200))
    assert doubled - base == 65 * 100


def test_init_deterministic():
    a = init_mapper(MapperConfig(embed_dim=32), seed=5)
    b = init_mapper(MapperConfig(embed_dim=32), seed=5)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    c = init_mapper(MapperConfig(embed_dim=32), seed=6)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_init_layernorm_identity(view_mapper):
    for b in range(view_mapper.config.blocks):
        np.testing.assert_array_equal(view_mapper.params[f"block{b}.ln_gain"], 1.0)
        np.testing.assert_array_equal(view_mapper.params[f"block{b}.ln_bias"], 0.0)


def test_view_token_norm(view_mapper, rng):
    for _ in range(10):
        x = rng.uniform(-1, 1, 64)
        r = float(rng.uniform(0.3, 3.0))
        pred = predict_view_token(view_mapper, x, r)
        assert abs(np.linalg.norm(pred.token) - r) / r < 1e-6
        assert pred.bypass is None


def test_initial_tokens_have_ref_norm(rng):
    mapper = init_mapper(MapperConfig(embed_dim=32), seed=42)
    for _ in range(5):
        pred = predict_view_token(mapper, rng.uniform(-1, 1, 64), 1.7)
        np.testing.assert_allclose(np.linalg.norm(pred.token), 1.7, rtol=1e-9)


def test_constant_mapper_outputs_scaled_bias(rng):
    mapper = init_mapper(MapperConfig(embed_dim=8), seed=1)
    mapper.params["head.weight"][:] = 0.0
    b = rng.standard_normal(8)
    mapper.params["head.bias"][:] = b
    r = 2.5
    for _ in range(5):
        pred = predict_view_token(mapper, rng.uniform(-1, 1, 64), r)
        np.testing.assert_allclose(pred.token, b * r / np.linalg.norm(b), atol=1e-12)


def test_forward_matches_oracle(view_mapper, rng):
    for _ in range(10):
        x = rng.uniform(-1, 1, 64)
        raw, _ = view_mapper.forward_raw(x)
        want = oracle_forward(view_mapper.params, view_mapper.config, x)
        np.testing.assert_allclose(raw, want, rtol=0, atol=1e-10)
        pred = predict_view_token(view_mapper, x, 1.3)
        np.testing.assert_allclose(pred.token, oracle_norm_scale(want, 1.3), atol=1e-10)


def test_scene_token_chunking_matches_oracle(scene_mapper, rng):
    d = scene_mapper.config.embed_dim
    for _ in range(5):
        x = rng.uniform(-1, 1, 64)
        want = oracle_forward(scene_mapper.params, scene_mapper.config, x)
        pred = predict_scene_token(scene_mapper, x, 0.8)
        np.testing.assert_allclose(pred.token, oracle_norm_scale(want[:d], 0.8), atol=1e-10)
        np.testing.assert_allclose(pred.bypass, oracle_norm_scale(want[d:], 0.2), atol=1e-10)


def test_bypass_norm_is_alpha(scene_mapper, rng):
    pred = predict_scene_token(scene_mapper, rng.uniform(-1, 1, 64), 1.0)
    np.testing.assert_allclose(np.linalg.norm(pred.bypass), 0.2, rtol=1e-9)
    zero_alpha = init_mapper(
        MapperConfig(embed_dim=32, bypass=True, bypass_alpha=0.0), seed=17
    )
    pred0 = predict_scene_token(zero_alpha, rng.uniform(-1, 1, 64), 1.0)
    np.testing.assert_array_equal(pred0.bypass, np.zeros(32))


def test_norm_scaling_idempotent(view_mapper, rng):
    x = rng.uniform(-1, 1, 64)
    once = predict_view_token(view_mapper, x, 1.0).token
    # rescaling the already-scaled token is a no-op
    again = once * 1.0 / np.linalg.norm(once)
    np.testing.assert_allclose(once, again, atol=1e-12)


def test_direction_preserved(view_mapper, rng):
    x = rng.uniform(-1, 1, 64)
    raw, _ = view_mapper.forward_raw(x)
    token = predict_view_token(view_mapper, x, 2.0).token
    cos = raw @ token / (np.linalg.norm(raw) * np.linalg.norm(token))
    assert cos > 1 - 1e-9


def test_bypass_half_does_not_touch_token(scene_mapper, rng):
    x = rng.uniform(-1, 1, 64)
    before = predict_scene_token(scene_mapper, x, 1.0)
    d = scene_mapper.config.embed_dim
    scene_mapper.params["head.weight"][d:] += 0.37
    scene_mapper.params["head.bias"][d:] -= 1.1
    after = predict_scene_token(scene_mapper, x, 1.0)
    np.testing.assert_array_equal(before.token, after.token)
    assert not np.array_equal(before.bypass, after.bypass)


def test_degenerate_direction_raises(rng):
    mapper = init_mapper(MapperConfig(embed_dim=8), seed=2)
    mapper.params["head.weight"][:] = 0.0
    mapper.params["head.bias"][:] = 0.0
    with pytest.raises(DegenerateTokenError):
        predict_view_token(mapper, rng.uniform(-1, 1, 64), 1.0)


def test_view_mapper_rejects_bypass_config(scene_mapper, view_mapper, rng):
    x = rng.uniform(-1, 1, 64)
    with pytest.raises(ValueError, match="bypass"):
        predict_view_token(scene_mapper, x, 1.0)
    with pytest.raises(ValueError, match="bypass"):
        predict_scene_token(view_mapper, x, 1.0)


def test_gradient_matches_finite_differences(view_mapper, rng):
    """d(scalar loss)/d(weight) via backward_raw vs central differences."""
    x = rng.uniform(-1, 1, 64)
    ref_norm = 1.4
    target = rng.standard_normal(32)

    def loss_fn():
        pred = predict_view_token(view_mapper, x, ref_norm)
        return 0.5 * float(np.sum((pred.token - target) ** 2))

    # analytic
    raw, cache = view_mapper.forward_raw(x)
    n = float(np.linalg.norm(raw))
    token = raw * ref_norm / n
    d_token = token - target
    d_raw = (ref_norm / n) * (d_token - raw * (float(raw @ d_token) / n**2))
    grads: dict[str, np.ndarray] = {}
    view_mapper.backward_raw(cache, d_raw, grads)

    h = 1e-5
    checks = 0
    gen = np.random.default_rng(7)
    for name in sorted(view_mapper.params):
        p = view_mapper.params[name]
        for _ in range(3):
            idx = tuple(gen.integers(0, s) for s in p.shape)
            orig = p[idx]
            p[idx] = orig + h
            lp = loss_fn()
            p[idx] = orig - h
            lm = loss_fn()
            p[idx] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-4, f"{name}[{idx}]: fd={fd} an={an}"
            checks += 1
    assert checks >= 30
