"""Acceptance suite: every criterion at its stated tolerance, one test each.

Heavy artifacts (trained runs) are module-scoped fixtures so the suite stays
well inside its runtime budgets. Everything here is deterministic: fixed
seeds, fixed configs, no tolerance tuning at runtime.

Run with:  pytest tests/test_acceptance.py -v
"""

import math

import numpy as np
import pytest

from viewtoken.backend import MockBackend, MockBackendConfig
from viewtoken.conditioning import (
    MapperTokenSource,
    PromptTemplate,
    assemble_request,
    build_prompt,
)
from viewtoken.data import (
    AugmentationConfig,
    DTU_ALL_SCANS,
    augment_traced,
    dtu_splits,
    identity_augmentations,
    single_view_nvs_augmentations,
    synth_scene,
)
from viewtoken.encoding import ConditioningInput, EncoderConfig, FourierEncoder
from viewtoken.geometry import CameraPose, classify_view, hull_contains, to_pose_vector
from viewtoken.mappers import (
    MapperConfig,
    init_mapper,
    parameter_count,
    predict_scene_token,
    predict_view_token,
)
from viewtoken.metrics import MockPerceptualAdapter, lpips, psnr, ssim
from viewtoken.seeding import derive_key, derive_rng
from viewtoken.training import (
    EVAL_TEMPLATE,
    VIEW_PLACEHOLDER,
    TrainConfig,
    finetune_nvs,
    load_checkpoint,
    oracle_free_embedding,
    pretrain_multi_scene,
    save_checkpoint,
    train_single_scene,
    expected_denoise_loss,
)
from viewtoken.backend import LossSample

from test_geometry import hull_oracle
from test_metrics import psnr_oracle, ssim_oracle


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def backend():
    return MockBackend()


@pytest.fixture(scope="module")
def blob9():
    """The frozen synthetic fixture: 9 views, train on the outer six."""
    manifest, images = synth_scene(n_views=9, grid_size=16, seed=11)
    train_views = [0, 1, 2, 6, 7, 8]
    held_views = [3, 4, 5]
    return manifest, images, train_views, held_views


@pytest.fixture(scope="module")
def trained_view_mapper(backend, blob9):
    """Criterion 7's training run: 2000 steps on the 6 train views."""
    manifest, images, train_views, _ = blob9
    cfg = TrainConfig(steps=2000, seed=5, augmentation=identity_augmentations())
    sub = manifest.subset(train_views)
    result = train_single_scene(sub, backend, cfg, images={v: images[v] for v in train_views})
    return cfg, result


def _render(backend, ckpt, mapper, manifest, view, cfg):
    encoder = ckpt.view_encoder()
    norm = ckpt.pose_normalization
    ref = ckpt.ref_norms[cfg.reference_word]
    pose = to_pose_vector(manifest.entry_for_view(view).pose, norm)
    src = MapperTokenSource(mapper, encoder, ref, prefix="view", pose=pose.values, trainable=False)
    resolved = build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, cfg.class_word, backend.tokenizer)
    req = assemble_request(resolved, view_source=src)
    return backend.sample_image(req, steps=8, seed=derive_key(42, manifest.scene_id, view))


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# 1. Split fidelity  (runtime < 1 s)
# ---------------------------------------------------------------------------


def test_criterion_01_split_fidelity():
    spec9 = dtu_splits(9)
    assert spec9.test_scenes == (8, 21, 30, 31, 34, 38, 40, 41, 45, 55, 63, 82, 103, 110, 114)
    assert spec9.train_views == (25, 22, 28, 40, 44, 48, 0, 8, 13)
    assert dtu_splits(6).train_views == (25, 22, 28, 40, 44, 48)
    assert dtu_splits(3).train_views == (25, 22, 28)
    assert dtu_splits(1).train_views == (25,)
    assert spec9.excluded_views == (3, 4, 5, 6, 7, 16, 17, 18, 19, 20, 21, 36, 37, 38, 39)
    expected_test = tuple(
        v
        for v in range(49)
        if v not in spec9.excluded_views and v not in spec9.train_views
    )
    assert spec9.test_views == expected_test
    pretrain = dtu_splits("all")
    assert len(pretrain.train_scenes) == 88
    excluded_scans = (
        1, 2, 7, 25, 26, 27, 29, 39, 51, 54, 56, 57, 58, 73, 83, 111, 112, 113, 115, 116, 117,
    )
    assert pretrain.train_scenes == tuple(
        s for s in DTU_ALL_SCANS if s not in spec9.test_scenes and s not in excluded_scans
    )


# ---------------------------------------------------------------------------
# 2. Encoder correctness  (runtime < 10 s)
# ---------------------------------------------------------------------------


def test_criterion_02_encoder_matches_oracle():
    enc = FourierEncoder(EncoderConfig(pose_dim=12, seed=77))
    rng = derive_rng(2024, "encoder-acceptance")
    for _ in range(1000):
        t = int(rng.integers(1, 1001))
        layer = int(rng.integers(0, 16))
        pose = rng.uniform(-1, 1, 12)
        got = enc.encode(ConditioningInput(t, layer, pose))
        v = np.array([t, layer, *pose], dtype=np.float64)
        proj = enc.frequencies @ v
        want = np.concatenate([np.sin(proj), np.cos(proj)])
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        assert np.all(got >= -1.0) and np.all(got <= 1.0)


# ---------------------------------------------------------------------------
# 3. Mapper contracts  (runtime < 10 s)
# ---------------------------------------------------------------------------


def test_criterion_03_mapper_contracts(backend):
    rng = derive_rng(7, "mapper-acceptance")
    view = init_mapper(MapperConfig(embed_dim=32), seed=3)
    scene = init_mapper(MapperConfig(embed_dim=32, bypass=True, bypass_alpha=0.2), seed=4)
    scene0 = init_mapper(MapperConfig(embed_dim=32, bypass=True, bypass_alpha=0.0), seed=4)
    for _ in range(100):
        x = rng.uniform(-1, 1, 64)
        ref = float(rng.uniform(0.2, 3.0))
        token = predict_view_token(view, x, ref).token
        assert abs(np.linalg.norm(token) - ref) / ref < 1e-6
        pred = predict_scene_token(scene, x, ref)
        assert abs(np.linalg.norm(pred.bypass) - 0.2) / 0.2 < 1e-6
    # alpha = 0 conditioning equals the no-bypass pipeline to 1e-7
    backend.tokenizer.register_placeholder("<view>")
    backend.tokenizer.register_placeholder("<scene-acc>")
    enc_cfg = EncoderConfig(pose_dim=2, seed=5)
    from viewtoken.encoding import scene_encoder_variant

    view_src = MapperTokenSource(
        init_mapper(MapperConfig(embed_dim=32), seed=9),
        FourierEncoder(enc_cfg), 1.0, prefix="view", pose=np.array([0.3, -0.4]),
    )
    scene_src = MapperTokenSource(scene0, scene_encoder_variant(enc_cfg), 1.0, prefix="scene")
    resolved = build_prompt(
        PromptTemplate(text="{VIEW}. a photo of a {SCENE}"), "<view>", "<scene-acc>",
        backend.tokenizer,
    )
    with_zero = assemble_request(resolved, view_source=view_src, scene_source=scene_src)
    no_bypass = assemble_request(resolved, view_source=view_src, scene_source=scene_src)
    no_bypass.bypass_injections.clear()
    for t, layer in ((1, 0), (50, 1), (100, 0)):
        a = backend.encode_text(with_zero, t, layer)
        b = backend.encode_text(no_bypass, t, layer)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-7)
    # exact closed-form parameter counts
    assert parameter_count(MapperConfig(embed_dim=768)) == 2 * (64 * 64 + 64 + 2 * 64) + 65 * 768
    assert parameter_count(MapperConfig(embed_dim=768, bypass=True)) == 2 * (
        64 * 64 + 64 + 2 * 64
    ) + 65 * 1536
    for mapper in (view, scene, scene0):
        assert parameter_count(mapper.config) == sum(v.size for v in mapper.params.values())


# ---------------------------------------------------------------------------
# 4. Gradient checks  (runtime < 30 s)
# ---------------------------------------------------------------------------


def test_criterion_04_gradients_vs_finite_differences(backend):
    backend.tokenizer.register_placeholder("<view>")
    enc = FourierEncoder(EncoderConfig(pose_dim=12, seed=13))
    mapper = init_mapper(MapperConfig(embed_dim=32), seed=21)
    pose = np.linspace(-0.8, 0.8, 12)
    resolved = build_prompt(
        PromptTemplate(text="{VIEW}. a photo of a statue"), "<view>", None, backend.tokenizer
    )
    rng = derive_rng(3, "grad-acceptance")
    z0 = rng.uniform(-1, 1, (16, 16, 1))
    eps = rng.standard_normal((16, 16, 1))
    t = 64

    def fresh_request():
        src = MapperTokenSource(mapper, enc, 1.0, prefix="view", pose=pose)
        return assemble_request(resolved, view_source=src)

    _, grads = backend.denoise_loss(LossSample(z0, eps, t, fresh_request()))
    names = sorted(mapper.params)
    h = 1e-5
    checked = 0
    while checked < 50:
        name = names[int(rng.integers(0, len(names)))]
        p = mapper.params[name]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        orig = p[idx]
        p[idx] = orig + h
        lp, _ = backend.denoise_loss(LossSample(z0, eps, t, fresh_request()), {})
        p[idx] = orig - h
        lm, _ = backend.denoise_loss(LossSample(z0, eps, t, fresh_request()), {})
        p[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[f"view/{name}"][idx]
        denom = max(abs(fd), abs(an))
        if denom < 1e-12:
            continue  # a coordinate the loss does not see at this input
        assert abs(fd - an) / denom < 1e-4, f"{name}[{idx}]: fd={fd} analytic={an}"
        checked += 1


# ---------------------------------------------------------------------------
# 5. Frozen backend and gradient isolation  (runtime < 2 min)
# ---------------------------------------------------------------------------


def test_criterion_05_frozen_backend_and_isolation(backend, blob9):
    manifest, images, train_views, _ = blob9
    digest_before = backend.weight_digest()
    cfg = TrainConfig(steps=300, seed=6, augmentation=identity_augmentations())
    sub = manifest.subset(train_views)
    result = train_single_scene(sub, backend, cfg, images={v: images[v] for v in train_views})
    assert backend.weight_digest() == digest_before
    # the nonzero-gradient set equals exactly the regime's trainable set
    mapper = result.checkpoint.view_mapper()
    encoder = result.checkpoint.view_encoder()
    ref = result.checkpoint.ref_norms[cfg.reference_word]
    pose = to_pose_vector(
        manifest.entry_for_view(train_views[0]).pose, result.checkpoint.pose_normalization
    )
    src = MapperTokenSource(mapper, encoder, ref, prefix="view", pose=pose.values)
    resolved = build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, cfg.class_word, backend.tokenizer)
    rng = derive_rng(1, "iso")
    _, grads = backend.denoise_loss(
        LossSample(
            backend.encode_image(images[train_views[0]]),
            rng.standard_normal((16, 16, 1)),
            40,
            assemble_request(resolved, view_source=src),
        )
    )
    assert set(grads) == {f"view/{k}" for k in mapper.params}
    assert all(np.any(g != 0) for g in grads.values())


# ---------------------------------------------------------------------------
# 6. Determinism and accumulation equivalence  (runtime < 4 min)
# ---------------------------------------------------------------------------


def test_criterion_06_determinism_and_accumulation(backend, blob9, tmp_path):
    manifest, images, train_views, _ = blob9
    sub = manifest.subset(train_views)
    imgs = {v: images[v] for v in train_views}
    cfg = TrainConfig(steps=150, seed=12, augmentation=identity_augmentations())
    a = train_single_scene(sub, backend, cfg, images=imgs)
    b = train_single_scene(sub, backend, cfg, images=imgs)
    pa, pb = tmp_path / "a.vt", tmp_path / "b.vt"
    save_checkpoint(a.checkpoint, str(pa))
    save_checkpoint(b.checkpoint, str(pb))
    assert pa.read_bytes() == pb.read_bytes()
    # 3x3 accumulation equals one batch of 9 to 1e-10 (64-bit)
    accum = train_single_scene(
        sub, backend,
        TrainConfig(steps=40, seed=12, micro_batch=3, grad_accumulation=3,
                    augmentation=identity_augmentations()),
        images=imgs,
    )
    batch9 = train_single_scene(
        sub, backend,
        TrainConfig(steps=40, seed=12, micro_batch=9, grad_accumulation=1,
                    augmentation=identity_augmentations()),
        images=imgs,
    )
    for name in accum.checkpoint.arrays:
        np.testing.assert_allclose(
            accum.checkpoint.arrays[name], batch9.checkpoint.arrays[name], rtol=0, atol=1e-10
        )


# ---------------------------------------------------------------------------
# 7. End-to-end view control on the synthetic scene  (runtime < 5 min CPU)
# ---------------------------------------------------------------------------


def test_criterion_07_view_control(backend, blob9, trained_view_mapper):
    manifest, images, train_views, held_views = blob9
    cfg, result = trained_view_mapper
    ckpt = result.checkpoint
    mapper = ckpt.view_mapper()
    train_poses = [manifest.entry_for_view(v).pose for v in train_views]
    interp_held = [
        v for v in held_views
        if classify_view(manifest.entry_for_view(v).pose, train_poses) == "interpolation"
    ]
    assert interp_held, "fixture must contain interpolated held-out views"

    train_err = [_mse(_render(backend, ckpt, mapper, manifest, v, cfg), images[v]) for v in train_views]
    held_err = [_mse(_render(backend, ckpt, mapper, manifest, v, cfg), images[v]) for v in interp_held]
    untrained = init_mapper(MapperConfig(embed_dim=32), seed=derive_key(999, "untrained"))
    untrained_err = [
        _mse(_render(backend, ckpt, untrained, manifest, v, cfg), images[v]) for v in interp_held
    ]
    assert np.mean(held_err) <= 2.0 * np.mean(train_err)
    assert np.mean(held_err) <= 0.5 * np.mean(untrained_err)

    # free-embedding oracle lower-bounds the mapper; mapper is within 20%
    sub = manifest.subset(train_views)
    oracle = oracle_free_embedding(
        sub, backend,
        TrainConfig(steps=600, seed=5, augmentation=identity_augmentations()),
        images={v: images[v] for v in train_views},
    )
    encoder = ckpt.view_encoder()
    ref = ckpt.ref_norms[cfg.reference_word]
    mapper_losses = []
    for v in train_views:
        pose = to_pose_vector(manifest.entry_for_view(v).pose, ckpt.pose_normalization)
        src = MapperTokenSource(mapper, encoder, ref, prefix="view", pose=pose.values, trainable=False)
        req = assemble_request(
            build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, cfg.class_word, backend.tokenizer),
            view_source=src,
        )
        mapper_losses.append(
            expected_denoise_loss(backend, req, backend.encode_image(images[v]), 64, cfg.seed)
        )
    mean_mapper = float(np.mean(mapper_losses))
    mean_oracle = float(np.mean(list(oracle.per_view_loss.values())))
    # the per-view dedicated, unconstrained embedding is never worse
    for v, ml in zip(train_views, mapper_losses):
        assert oracle.per_view_loss[v] <= ml * (1 + 1e-9), f"view {v}"
    assert mean_oracle <= mean_mapper * (1 + 1e-9), "oracle must lower-bound the mapper"
    assert mean_mapper <= 1.2 * mean_oracle, f"mapper {mean_mapper} vs oracle {mean_oracle}"


# ---------------------------------------------------------------------------
# 8. Desk-scale pretrain + single-image NVS  (runtime < 10 min CPU)
# ---------------------------------------------------------------------------


def test_criterion_08_pretrain_and_single_image_nvs(backend):
    mild = AugmentationConfig(
        rotation_prob=0.5, rotation_degrees=8.0, crop_scale=(0.92, 1.08),
        jitter_prob=0.5, blur_prob=0.1,
    )
    scenes = []
    images = {}
    for s in range(4):
        m, im = synth_scene(n_views=9, grid_size=16, seed=100 + s)
        scenes.append(m)
        images[m.scene_id] = im
    held_manifest, held_images = synth_scene(n_views=9, grid_size=16, seed=200)

    pre = pretrain_multi_scene(
        scenes, backend, TrainConfig(steps=1200, seed=9, augmentation=mild), images=images
    )
    view_digest = pre.checkpoint.view_mapper_digest()
    ft = finetune_nvs(
        held_manifest.subset([4]), pre.checkpoint, backend,
        TrainConfig(steps=600, seed=10, augmentation=mild), images={4: held_images[4]},
    )
    assert ft.checkpoint.view_mapper_digest() == view_digest  # frozen, digest-verified

    def render_with_scene(ckpt, manifest, scene_id, view):
        tokenizer = backend.tokenizer
        ph = f"<scene-{scene_id}>"
        tokenizer.register_placeholder(ph)
        ref = ckpt.ref_norms["object"]
        pose = to_pose_vector(manifest.entry_for_view(view).pose, ckpt.pose_normalization)
        vsrc = MapperTokenSource(
            ckpt.view_mapper(), ckpt.view_encoder(), ref, prefix="view",
            pose=pose.values, trainable=False,
        )
        ssrc = MapperTokenSource(
            ckpt.scene_mapper(scene_id), ckpt.scene_encoder(), ref, prefix="scene",
            trainable=False,
        )
        req = assemble_request(
            build_prompt(EVAL_TEMPLATE, VIEW_PLACEHOLDER, ph, tokenizer),
            view_source=vsrc, scene_source=ssrc,
        )
        return backend.sample_image(req, steps=8, seed=derive_key(42, scene_id, view))

    pretrain_err = [
        _mse(render_with_scene(pre.checkpoint, m, m.scene_id, v), images[m.scene_id][v])
        for m in scenes
        for v in m.view_indices()
    ]
    held_err = [
        _mse(render_with_scene(ft.checkpoint, held_manifest, held_manifest.scene_id, v), held_images[v])
        for v in held_manifest.view_indices()
        if v != 4
    ]
    assert np.mean(held_err) <= 2.0 * np.mean(pretrain_err), (
        f"held {np.mean(held_err):.4f} vs pretrain {np.mean(pretrain_err):.4f}"
    )


# ---------------------------------------------------------------------------
# 9. Augmentation laws  (runtime < 1 min)
# ---------------------------------------------------------------------------


def test_criterion_09_augmentation_laws():
    img = np.zeros((16, 16, 3))
    img[:, :5, 0] = 1.0
    img[4:8, 10:, 1] = 0.8
    img[:, :, 2] = np.linspace(0, 1, 16)[None, :]
    mirror = img[:, ::-1]
    cfg = single_view_nvs_augmentations()
    n = 10000
    rotations = 0
    scale_lo, scale_hi = np.inf, -np.inf
    for i in range(n):
        out, trace = augment_traced(img, cfg, derive_rng(2025, "aug-laws", i))
        assert not np.allclose(out, mirror, atol=0.05), "mirror output observed"
        rotations += trace.rotation_applied
        scale_lo = min(scale_lo, trace.crop_scale)
        scale_hi = max(scale_hi, trace.crop_scale)
    assert abs(rotations / n - 0.75) <= 0.013
    assert cfg.crop_scale[0] <= scale_lo and scale_hi <= cfg.crop_scale[1]


# ---------------------------------------------------------------------------
# 10. Metric oracles  (runtime < 30 s)
# ---------------------------------------------------------------------------


def test_criterion_10_metric_oracles():
    rng = derive_rng(55, "metric-acceptance")
    adapter = MockPerceptualAdapter()
    for _ in range(100):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.4), a.shape), 0, 1)
        assert psnr(a, b) == pytest.approx(psnr_oracle(a, b), abs=1e-10)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)
    gt = rng.uniform(0, 1, (16, 16, 3))
    assert psnr(gt, gt) == 100.0
    assert ssim(gt, gt) == pytest.approx(1.0, abs=1e-12)
    assert lpips(adapter, gt, gt) == 0.0


# ---------------------------------------------------------------------------
# 11. Interpolation/extrapolation classifier  (runtime < 10 s)
# ---------------------------------------------------------------------------


def test_criterion_11_classifier_vs_oracle():
    rng = derive_rng(99, "hull-acceptance")
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        pts = rng.uniform(0.1, 3.0, size=(n, 2))
        if rng.uniform() < 0.25 and n >= 2:
            direction = rng.uniform(-1, 1, 2)
            pts = pts[:1] + np.outer(rng.uniform(0, 1, n), direction)
        if rng.uniform() < 0.5:
            w = rng.dirichlet(np.ones(n))
            q = w @ pts
        else:
            q = rng.uniform(-0.5, 3.6, 2)
        assert hull_contains(pts, q) == hull_oracle(pts, q)


# ---------------------------------------------------------------------------
# 12. Checkpoint robustness  (runtime < 10 s)
# ---------------------------------------------------------------------------


def test_criterion_12_checkpoint_robustness(backend, blob9, tmp_path):
    from viewtoken.training import BackendMismatchError, CheckpointError

    manifest, images, train_views, _ = blob9
    sub = manifest.subset(train_views)
    cfg = TrainConfig(steps=4, seed=1, augmentation=identity_augmentations())
    result = train_single_scene(sub, backend, cfg, images={v: images[v] for v in train_views})
    path = tmp_path / "ckpt.vt"
    save_checkpoint(result.checkpoint, str(path))
    loaded = load_checkpoint(str(path), backend=backend)
    for name, arr in result.checkpoint.arrays.items():
        np.testing.assert_array_equal(loaded.arrays[name], arr)
    # single-byte corruption detected
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    corrupt = tmp_path / "corrupt.vt"
    corrupt.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(corrupt))
    # descriptor-digest mismatch rejected
    with pytest.raises(BackendMismatchError):
        load_checkpoint(str(path), backend=MockBackend(MockBackendConfig(seed=31337)))
