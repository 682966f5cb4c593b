import numpy as np
import pytest

from promptrecon import tensor as T
from promptrecon.errors import CheckpointError, DimensionError, TrainingDivergenceError
from promptrecon.predictor import (
    ModelConfig,
    PretrainConfig,
    Predictor,
    PromptSet,
    load_checkpoint,
    patch_index,
    patch_of,
    patchify,
    pretrain,
    save_checkpoint,
    unpatchify,
)
from promptrecon.tensor import Tensor
from promptrecon.world import Intrinsics, generate_scene, loop_trajectory, render

from conftest import central_diff

SMALL = ModelConfig(H=16, W=16, patch=4, D=16, depth=2, heads=2, n_prompt=2, head_hidden=16)


def images(cfg, rng, n=None):
    shape = (cfg.H, cfg.W, cfg.feat_ch) if n is None else (n, cfg.H, cfg.W, cfg.feat_ch)
    return rng.normal(size=shape)


def test_patch_index_round_trip_exhaustive():
    cfg = ModelConfig(H=16, W=16, patch=4, D=16, heads=2)
    seen = set()
    for k in range(cfg.n_tokens):
        r, c = patch_index(k, cfg)
        assert patch_of(r, c, cfg) == k
        seen.add((r, c))
    assert seen == {(r, c) for r in range(4) for c in range(4)}


def test_patchify_places_pixels(rng):
    img = images(SMALL, rng, 2)
    tok = patchify(img, SMALL)
    k = patch_of(2, 1, SMALL)
    np.testing.assert_array_equal(tok[1, k].reshape(4, 4, 3), img[1, 8:12, 4:8])
    back = unpatchify(Tensor(patchify(img, SMALL)), SMALL, 3)
    np.testing.assert_array_equal(back.data, img)


def test_config_validation():
    with pytest.raises(DimensionError):
        ModelConfig(H=30, W=32, patch=4)
    with pytest.raises(DimensionError):
        ModelConfig(D=30, heads=4)


def test_embed_zero_image_is_bias_plus_position():
    p = Predictor(SMALL, seed=1)
    p.params["embed.b"].data = np.linspace(-1, 1, SMALL.D)
    tok = p.embed_patches(np.zeros((SMALL.H, SMALL.W, 3))).data[0]
    np.testing.assert_allclose(tok, p.params["embed.b"].data + p.pos, rtol=0, atol=0)


def test_embed_locality(rng):
    p = Predictor(SMALL, seed=1)
    a = images(SMALL, rng)
    b = a.copy()
    b[4:8, 8:12] += 1.0
    diff = np.abs(p.embed_patches(a).data - p.embed_patches(b).data).sum(axis=-1)[0]
    changed = np.flatnonzero(diff > 0)
    assert list(changed) == [patch_of(1, 2, SMALL)]


def test_embed_rejects_wrong_extent(rng):
    with pytest.raises(DimensionError):
        Predictor(SMALL).embed_patches(rng.normal(size=(8, 8, 3)))


@pytest.mark.parametrize("n_p", [0, 1, 8])
def test_encoder_keeps_token_count(rng, n_p):
    cfg = ModelConfig(H=16, W=16, patch=4, D=16, depth=2, heads=2, n_prompt=n_p, head_hidden=16)
    p = Predictor(cfg, seed=0)
    out = p.encode_with_prompts(p.embed_patches(images(cfg, rng, 3)), PromptSet.zeros(cfg))
    assert out.shape == (3, cfg.n_tokens, cfg.D)


def test_no_prompts_is_plain_encoder(rng):
    cfg0 = ModelConfig(H=16, W=16, patch=4, D=16, depth=2, heads=2, n_prompt=0, head_hidden=16)
    p = Predictor(cfg0, seed=3)
    tok = p.embed_patches(images(cfg0, rng))
    x = tok
    for i in range(cfg0.depth):
        x = p.encoder_layer(x, i)
    np.testing.assert_array_equal(p.encode_with_prompts(tok, PromptSet.zeros(cfg0)).data, x.data)
    np.testing.assert_array_equal(p.encode_with_prompts(tok, None).data, x.data)


def test_zero_prompts_change_output_only_through_attention(rng):
    p = Predictor(SMALL, seed=3)
    I, K = images(SMALL, rng), images(SMALL, rng)
    with_zero = p.predict(I, K, PromptSet.zeros(SMALL))
    again = p.predict(I, K, PromptSet.zeros(SMALL))
    without = p.predict(I, K, None)
    np.testing.assert_array_equal(with_zero.X_self, again.X_self)
    assert not np.array_equal(with_zero.X_self, without.X_self)


def test_prompt_mismatch_rejected(rng):
    p = Predictor(SMALL)
    bad = PromptSet([np.zeros((SMALL.n_prompt, SMALL.D))])  # one block short
    with pytest.raises(DimensionError):
        p.forward_pair(images(SMALL, rng), images(SMALL, rng), bad)


def test_forward_pair_shapes_determinism_confidence(rng):
    p = Predictor(SMALL, seed=2)
    I, K = images(SMALL, rng), images(SMALL, rng)
    P = PromptSet([rng.normal(size=(SMALL.n_prompt, SMALL.D)) for _ in range(SMALL.depth)])
    a = p.predict(I, K, P)
    b = p.predict(I, K, P)
    for x, y in zip((a.X_self, a.X_cross, a.C_self, a.C_cross), (b.X_self, b.X_cross, b.C_self, b.C_cross)):
        np.testing.assert_array_equal(x, y)
    assert a.X_self.shape == a.X_cross.shape == (16, 16, 3)
    assert a.C_self.shape == a.C_cross.shape == (16, 16)
    assert np.all(a.C_self > 1) and np.all(a.C_cross > 1)
    with pytest.raises(DimensionError):
        p.forward_pair(I, images(SMALL, rng, 2), P)


def test_batched_equals_single(rng):
    p = Predictor(SMALL, seed=2)
    I, K = images(SMALL, rng, 3), images(SMALL, rng, 3)
    batch = p.predict(I, K, PromptSet.zeros(SMALL))
    one = p.predict(I[1], K[1], PromptSet.zeros(SMALL))
    np.testing.assert_allclose(batch.X_cross[1], one.X_cross, rtol=1e-12, atol=1e-13)


def test_prompt_gradients_match_finite_differences(rng):
    p = Predictor(SMALL, seed=4)
    I, K = images(SMALL, rng), images(SMALL, rng)
    P = PromptSet([0.3 * rng.normal(size=(SMALL.n_prompt, SMALL.D)) for _ in range(SMALL.depth)])
    target = rng.normal(size=(SMALL.H, SMALL.W, 3))

    def loss_of(prompts):
        out = p.forward_pair(I, K, prompts)
        d = out.X_self - target
        return (d * d).sum() + (out.C_cross * 0.1).sum()

    T.backward(loss_of(P), list(P))
    assert all(w.grad is None for w in p.params.values())
    for layer in range(SMALL.depth):
        assert np.any(P[layer].grad != 0)
        for idx in [(0, 1), (1, 7), (0, 15)]:
            def f(v, layer=layer):
                arrs = P.arrays()
                arrs[layer] = v
                with T.no_grad():
                    return loss_of(PromptSet(arrs)).item()

            fd = central_diff(f, P[layer].data, idx)
            assert abs(P[layer].grad[idx] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    p = Predictor(SMALL, seed=9)
    d1 = save_checkpoint(tmp_path / "a.ckpt", p, extra={"note": 1})
    d2 = save_checkpoint(tmp_path / "b.ckpt", p, extra={"note": 1})
    assert d1 == d2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    q, extra = load_checkpoint(tmp_path / "a.ckpt", SMALL)
    assert extra == {"note": 1}
    assert q.digest() == p.digest()
    # prompt length is not part of the backbone
    load_checkpoint(tmp_path / "a.ckpt", ModelConfig(**{**SMALL.__dict__, "n_prompt": 5}))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt", ModelConfig(**{**SMALL.__dict__, "D": 32}))
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")


def test_pretrain_zero_steps_keeps_weights():
    p = Predictor(SMALL, seed=5)
    before = p.digest()
    pretrain(p, PretrainConfig(steps=0))
    assert p.digest() == before
    assert all(not w.requires_grad for w in p.params.values())


def _self_error(p, frames):
    errs = [np.linalg.norm(p.predict(f.image, f.image).X_self - f.gt_pointmap, axis=-1).mean() for f in frames]
    return float(np.mean(errs))


def test_pretraining_reduces_error_and_loss_trend():
    cfg = ModelConfig(H=16, W=16, patch=4, D=32, depth=2, heads=2, n_prompt=2, head_hidden=32)
    pc = PretrainConfig(steps=150, batch=4, lr=2e-3, warmup=10, n_scenes=4, frames_per_scene=30, seed=0)
    intr = Intrinsics(16, 16)
    held_out = [render(generate_scene(777), pose, intr) for pose in loop_trajectory(777, 10).poses[::3]]
    p = Predictor(cfg, seed=0)
    untrained = _self_error(p, held_out)
    log = pretrain(p, pc, log_every=0)
    assert _self_error(p, held_out) < untrained
    losses = np.array(log.losses)
    assert losses[-30:].mean() < losses[:30].mean()


def test_pretrain_divergence_raises():
    p = Predictor(SMALL, seed=0)
    with pytest.raises(TrainingDivergenceError), np.errstate(over="ignore", invalid="ignore"):
        pretrain(p, PretrainConfig(steps=5, batch=2, lr=1e300, warmup=1, n_scenes=1, frames_per_scene=5), log_every=0)
    assert all(not w.requires_grad for w in p.params.values())
