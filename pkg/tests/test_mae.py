import numpy as np
import pytest

from cascade_mae.checkpoint import load_mae, read_params, save_mae
from cascade_mae.data import (BERNOULLI, FIXED, Geometry, MaskPlan, PatchSequence, apply_mask_zero,
                              full_plan, patchify, sample_mask, synth_dataset)
from cascade_mae.gradcheck import grad_check
from cascade_mae.mae import (ALL_PIXELS, MASKED_ONLY, MaeConfig, MaeParams, decode_full,
                             encode_visible, feature_interference, init_mae, loss_and_grads,
                             masked_recon_loss, reconstruct, train_step, zero_reference)
from cascade_mae.optim import AdamConfig, init_optimizer
from cascade_mae.rng import RngStream

TINY = MaeConfig(Geometry(4, 4, 2, 1), d_enc=8, d_dec=4, enc_heads=2, dec_heads=2, mlp_ratio=2)


@pytest.fixture
def model():
    return init_mae(MaeConfig(), 0)


@pytest.fixture
def batch():
    return patchify(synth_dataset(4, 4, 16, 16, 0.5, 0), 4)


def _perturbed(mae, scale=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return {k: v.astype(np.float64) + scale * rng.standard_normal(v.shape) for k, v in mae.params.items()}


def test_encode_shapes(model, batch):
    plan = sample_mask(len(batch), 16, 0.0, FIXED, 0)
    assert encode_visible(model, batch, plan).shape == (len(batch), 16, 64)
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 0)
    assert encode_visible(model, batch, plan).shape == (len(batch), 4, 64)


def test_encoder_rejects_bernoulli(model, batch):
    with pytest.raises(ValueError):
        encode_visible(model, batch, sample_mask(len(batch), 16, 0.5, BERNOULLI, 0))


def test_zero_reference_point(model, batch):
    zm = zero_reference(model)
    zero = PatchSequence(np.zeros_like(batch.patches), batch.geometry)
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 1)
    z = encode_visible(zm, zero, plan)
    assert not z.any()
    assert not decode_full(zm, np.zeros_like(z), plan).patches.any()


def test_encoder_sample_permutation(model, batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 2)
    perm = np.array([2, 0, 3, 1])
    z = encode_visible(model, batch, plan)
    zp = encode_visible(model, batch.take(perm), plan.take(perm))
    np.testing.assert_allclose(zp, z[perm], rtol=1e-5, atol=1e-6)


def test_encoder_visible_order_relabeling(model, batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 3)
    z = encode_visible(model, batch, plan)
    flipped = plan.order.copy()
    flipped[:, :4] = flipped[:, 3::-1]
    z2 = encode_visible(model, batch, MaskPlan(flipped, plan.visible, plan.ratio))
    # same tokens, listed in reverse
    np.testing.assert_allclose(z2, z[:, ::-1], rtol=1e-5, atol=1e-6)


def test_decoder_output_shape_independent_of_b(model, batch):
    for ratio in (0.0, 0.5, 0.75):
        plan = sample_mask(len(batch), 16, ratio, FIXED, 0)
        assert reconstruct(model, batch, plan).patches.shape == batch.patches.shape


def test_masked_patch_content_is_ignored(model, batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 4)
    out = reconstruct(model, batch, plan).patches
    noisy = batch.patches.copy()
    noisy[plan.masked] += 5.0
    out2 = reconstruct(model, PatchSequence(noisy, batch.geometry), plan).patches
    assert np.array_equal(out, out2)


def test_decoder_plan_mismatch(model, batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 0)
    z = encode_visible(model, batch, plan)
    with pytest.raises(ValueError):
        decode_full(model, z, sample_mask(len(batch), 16, 0.5, FIXED, 0))


def test_loss_values(batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 0)
    assert masked_recon_loss(batch, batch, plan) == 0
    recon = batch.patches.copy()
    i, j = np.argwhere(plan.masked)[0]
    recon[i, j, 0] += 2.0
    n_masked_pixels = plan.masked.sum() * batch.geometry.patch_dim
    assert masked_recon_loss(PatchSequence(recon, batch.geometry), batch, plan) == pytest.approx(
        0.5 * 4 / n_masked_pixels)


def test_loss_modes_without_masking(batch):
    plan = sample_mask(len(batch), 16, 0.0, FIXED, 0)
    shifted = PatchSequence(batch.patches + 1.0, batch.geometry)
    with pytest.raises(ValueError):
        masked_recon_loss(shifted, batch, plan, MASKED_ONLY)
    assert masked_recon_loss(shifted, batch, plan, ALL_PIXELS) == pytest.approx(0.5)


@pytest.mark.parametrize("mode", [MASKED_ONLY, ALL_PIXELS])
def test_full_mae_gradient(mode):
    mae = init_mae(TINY, 0)
    params = _perturbed(mae)
    x = np.random.default_rng(1).random((2, 4, 4))
    plan = sample_mask(2, 4, 0.5, FIXED, 1)
    rep = grad_check(lambda p: loss_and_grads(p, TINY, x, plan, mode)[:2], params, 1e-4)
    assert rep.passed, rep.failures()


def test_two_block_encoder_gradient():
    cfg = MaeConfig(Geometry(4, 4, 2, 1), d_enc=8, d_dec=4, enc_heads=2, dec_heads=1, mlp_ratio=2, depth=2)
    params = _perturbed(init_mae(cfg, 1))
    x = np.random.default_rng(2).random((2, 4, 4))
    plan = sample_mask(2, 4, 0.25, FIXED, 2)
    rep = grad_check(lambda p: loss_and_grads(p, cfg, x, plan)[:2], params, 1e-4)
    assert rep.passed, rep.failures()


def test_lr_zero_keeps_params(model, batch):
    opt = init_optimizer(model.params, AdamConfig(lr=0.0))
    new, _, loss = train_step(model, opt, batch, RngStream(0))
    assert np.isfinite(loss)
    for k in model.params:
        assert np.array_equal(new.params[k], model.params[k])


def test_train_step_deterministic(model, batch):
    runs = []
    for _ in range(2):
        m, o = model, init_optimizer(model.params)
        for i in range(3):
            m, o, _ = train_step(m, o, batch, RngStream(5).derive("step", i))
        runs.append(m)
    for k in model.params:
        assert np.array_equal(runs[0].params[k], runs[1].params[k])


def test_training_halves_loss():
    data = patchify(synth_dataset(4, 4, 16, 16, 0.5, 3), 4)  # 16 images
    m = init_mae(MaeConfig(), 3)
    o = init_optimizer(m.params)
    losses = []
    for i in range(200):
        m, o, loss = train_step(m, o, data, RngStream(3).derive("step", i))
        losses.append(loss)
    assert losses[-1] <= 0.5 * losses[0]
    assert losses[-1] < losses[0]


def test_nonfinite_loss_aborts(model, batch):
    bad = model.copy()
    bad.params["dec.head.b"][:] = np.nan
    with pytest.raises(FloatingPointError):
        train_step(bad, init_optimizer(bad.params), batch, RngStream(0))


def test_interference_zero_without_masking(model, batch):
    plan = full_plan(len(batch), 16)
    assert not feature_interference(model, batch, plan).any()


def test_interference_linear_surrogate(model, batch):
    plan = sample_mask(len(batch), 16, 0.75, FIXED, 0)
    m64 = MaeParams(model.config, {k: v.astype(np.float64) for k, v in model.params.items()})
    x = batch.patches.astype(np.float64)
    seq = PatchSequence(x, batch.geometry)
    dz = feature_interference(m64, seq, plan, linear_surrogate=True)
    expected = (x - apply_mask_zero(seq, plan).patches) @ m64.params["enc.embed.w"]
    np.testing.assert_allclose(dz, expected, atol=1e-12)


def test_interference_grows_with_ratio(model, batch):
    means = []
    for p in (0.25, 0.5, 0.75):
        norms = [np.linalg.norm(feature_interference(
            model, batch, sample_mask(len(batch), 16, p, FIXED, RngStream(1).derive("mc", k))))
            for k in range(100)]
        means.append(np.mean(norms))
    assert means[0] <= means[1] <= means[2]


def test_checkpoint_round_trip(tmp_path, model):
    path = save_mae(tmp_path / "m.ckpt", model, round=3)
    back = load_mae(path)
    assert back.config == model.config
    for k, v in model.params.items():
        assert back.params[k].dtype == np.float32
        assert back.params[k].tobytes() == v.tobytes()
    _, meta = read_params(path)
    assert meta["round"] == "3" and meta["kind"] == "mae"


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"hello\nend\n")
    with pytest.raises(ValueError):
        load_mae(p)
