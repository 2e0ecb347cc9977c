import numpy as np
import pytest

from cascade_mae import layers as L
from cascade_mae.cascade import (CascadeSpec, ViTClassifier, assemble_multiblock_mae, block_params,
                                 cascade_assemble, classifier_from_mae, classifier_loss_and_grads,
                                 evaluate, finetune, fresh_classifier, linear_params, model_footprint,
                                 read_ppm, reconstruct_dump, reconstruction_grid, server_refine,
                                 stratified_subset)
from cascade_mae.data import FIXED, Geometry, ImageBatch, patchify, sample_mask, synth_dataset, unpatchify
from cascade_mae.gradcheck import grad_check
from cascade_mae.mae import MaeConfig, eval_recon_loss, init_mae, reconstruct
from cascade_mae.rng import RngStream

CFG = MaeConfig(Geometry(8, 8, 4, 3), d_enc=16, d_dec=8, enc_heads=2, dec_heads=2, mlp_ratio=2)


@pytest.fixture(scope="module")
def sources():
    return [init_mae(CFG, RngStream(0).derive("src", i)) for i in range(3)]


@pytest.fixture(scope="module")
def toy():
    return synth_dataset(8, 4, 8, 8, 0.3, 0)


def _blk(params, i):
    return L.sub(params, f"enc.block{i}")


def _same(a, b):
    return set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_pretrained_slots_bit_exact(sources):
    clf = cascade_assemble(sources, CascadeSpec(3, 2), 4, 0)
    assert _same(_blk(clf.params, 0), _blk(sources[0].params, 0))
    assert _same(_blk(clf.params, 1), _blk(sources[1].params, 0))
    assert not _same(_blk(clf.params, 2), _blk(sources[2].params, 0))
    for k in ("enc.embed.w", "enc.embed.b", "enc.pos"):
        assert clf.params[k].tobytes() == sources[0].params[k].tobytes()


def test_single_block_copy(sources):
    clf = cascade_assemble(sources, CascadeSpec(1, 1), 4, 0)
    assert _same(_blk(clf.params, 0), _blk(sources[0].params, 0))
    assert clf.params["head.w"].shape == (16, 4)


def test_explicit_source_order_and_replicate(sources):
    clf = cascade_assemble(sources, CascadeSpec(2, 2, source=(2, 0)), 4, 0)
    assert _same(_blk(clf.params, 0), _blk(sources[2].params, 0))
    assert _same(_blk(clf.params, 1), _blk(sources[0].params, 0))
    rep = cascade_assemble(sources, CascadeSpec(3, 3, source="replicate:1"), 4, 0)
    for i in range(3):
        assert _same(_blk(rep.params, i), _blk(sources[1].params, 0))


def test_spec_errors(sources):
    with pytest.raises(ValueError):
        cascade_assemble(sources, CascadeSpec(2, 3), 4, 0)
    with pytest.raises(ValueError):
        cascade_assemble(sources, CascadeSpec(2, 2, source=(0,)), 4, 0)
    with pytest.raises(ValueError):
        cascade_assemble(sources, CascadeSpec(4, 4), 4, 0)
    other = init_mae(MaeConfig(CFG.geometry, d_enc=8, d_dec=8, enc_heads=2, dec_heads=2, mlp_ratio=2), 0)
    with pytest.raises(ValueError):
        cascade_assemble(sources + [other], CascadeSpec(1, 1), 4, 0)


def test_fresh_slots_shared_across_arms(sources):
    a = cascade_assemble(sources, CascadeSpec(3, 1), 4, 5)
    b = cascade_assemble(sources, CascadeSpec(3, 2), 4, 5)
    assert _same(_blk(a.params, 2), _blk(b.params, 2))
    assert a.params["head.w"].tobytes() == b.params["head.w"].tobytes()


def test_unpretrained_baseline(sources):
    clf = cascade_assemble(sources, CascadeSpec(3, 0), 4, 0)
    for i in range(3):
        assert not any(_same(_blk(clf.params, i), _blk(s.params, 0)) for s in sources)
    assert clf.params["enc.pos"].tobytes() != sources[0].params["enc.pos"].tobytes()
    f = fresh_classifier(CFG, 3, 4, 0)
    assert _same(f.params, clf.params)


def test_shuffled_order_uses_seed(sources):
    spec = CascadeSpec(3, 3, init_seed=4, shuffle_order=True)
    ids = spec.source_ids(3)
    assert sorted(ids) == [0, 1, 2]
    assert ids == CascadeSpec(3, 3, init_seed=4, shuffle_order=True).source_ids(3)


def test_multiblock_depth_one_matches_source(sources, toy):
    m = assemble_multiblock_mae(sources, 1)
    seq = patchify(toy, 4)
    plan = sample_mask(len(seq), 4, 0.5, FIXED, 0)
    assert np.array_equal(reconstruct(m, seq, plan).patches, reconstruct(sources[0], seq, plan).patches)


def test_multiblock_distinct_blocks(sources):
    m = assemble_multiblock_mae(sources, 3)
    blocks = [_blk(m.params, i) for i in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            dist = sum(np.abs(blocks[i][k] - blocks[j][k]).sum() for k in blocks[i])
            assert dist > 0
    assert m.params["dec.head.w"].tobytes() == sources[0].params["dec.head.w"].tobytes()


def test_server_refine_noops(sources, toy):
    m = assemble_multiblock_mae(sources, 2)
    empty = ImageBatch(toy.images[:0], toy.labels[:0])
    assert server_refine(m, empty, 3, 0) is m
    assert server_refine(m, toy, 0, 0) is m
    assert server_refine(m, None, 3, 0) is m


def test_server_refine_lowers_loss(sources, toy):
    m = assemble_multiblock_mae(sources, 2)
    seq = patchify(toy, 4)
    plan = sample_mask(len(seq), 4, 0.75, FIXED, 1)
    before = eval_recon_loss(m, seq, plan)
    after = eval_recon_loss(server_refine(m, toy, 20, 0, batch_size=8), seq, plan)
    assert after < before


def test_classifier_from_mae_keeps_blocks(sources):
    m = assemble_multiblock_mae(sources, 3)
    clf = classifier_from_mae(m, 4, 0)
    for i in range(3):
        assert _same(_blk(clf.params, i), _blk(m.params, i))


def test_classifier_gradient():
    cfg = MaeConfig(Geometry(4, 4, 2, 1), d_enc=8, d_dec=4, enc_heads=2, dec_heads=2, mlp_ratio=2)
    clf = fresh_classifier(cfg, 2, 3, 0)
    gen = np.random.default_rng(0)
    params = {k: v.astype(np.float64) + 0.1 * gen.standard_normal(v.shape) for k, v in clf.params.items()}
    x = gen.random((3, 4, 4))
    labels = np.array([0, 2, 1])
    rep = grad_check(lambda p: classifier_loss_and_grads(p, clf.config, x, labels), params, 1e-4)
    assert rep.passed, rep.failures()


def test_stratified_subset():
    labels = np.repeat(np.arange(4), 10)
    idx = stratified_subset(labels, 0.1, RngStream(0))
    assert np.array_equal(np.bincount(labels[idx]), [1, 1, 1, 1])
    with pytest.raises(ValueError):
        stratified_subset(labels, 0.05, RngStream(0))
    with pytest.raises(ValueError):
        stratified_subset(labels, 0.0, RngStream(0))


def test_evaluate_basic_predictors(toy):
    clf = fresh_classifier(CFG, 1, 4, 0)
    z = {k: v for k, v in clf.params.items()}
    z["head.w"] = np.zeros_like(z["head.w"])
    z["head.b"] = np.zeros_like(z["head.b"])
    const = ViTClassifier(clf.config, 4, z)
    assert evaluate(const, toy) == pytest.approx(0.25)  # ties -> class 0
    perm = np.random.default_rng(0).permutation(len(toy))
    assert evaluate(clf, toy) == evaluate(clf, toy.take(perm))
    with pytest.raises(ValueError):
        evaluate(clf, toy.take(np.arange(0)))


def test_random_head_near_chance():
    test = synth_dataset(250, 4, 8, 8, 0.5, 3)  # 1000 balanced samples
    accs = [evaluate(fresh_classifier(CFG, 1, 4, s), test) for s in range(20)]
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_finetune_zero_epochs_untouched(toy):
    clf = fresh_classifier(CFG, 1, 4, 0)
    out, curve = finetune(clf, toy, 1.0, 0, 0)
    assert curve == [] and _same(out.params, clf.params)


def test_finetune_fits_clean_data():
    train = synth_dataset(8, 4, 8, 8, 0.0, 1)
    clf = fresh_classifier(CFG, 1, 4, 0)
    clf, curve = finetune(clf, train, 1.0, 40, RngStream(0), batch_size=8)
    assert curve[-1].train_accuracy >= 0.99
    assert evaluate(clf, train) >= 0.99


def test_finetune_deterministic(toy):
    a, _ = finetune(fresh_classifier(CFG, 1, 4, 0), toy, 0.5, 2, RngStream(3))
    b, _ = finetune(fresh_classifier(CFG, 1, 4, 0), toy, 0.5, 2, RngStream(3))
    assert _same(a.params, b.params)


def test_fewer_labels_not_better():
    train = synth_dataset(20, 4, 8, 8, 0.5, 2)
    test = synth_dataset(50, 4, 8, 8, 0.5, 4)
    lo, hi = [], []
    for s in range(5):
        for frac, out in ((0.1, lo), (1.0, hi)):
            clf, _ = finetune(fresh_classifier(CFG, 1, 4, s), train, frac, 15, RngStream(s), 16)
            out.append(evaluate(clf, test))
    assert np.median(lo) <= np.median(hi)


def test_reconstruction_grid_layout(sources, toy, tmp_path):
    imgs = toy.take(np.arange(3))
    path = reconstruct_dump(sources[0], imgs, 0.75, 0, tmp_path / "r.ppm")
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n32 24\n255\n")
    assert read_ppm(path).shape == (24, 32, 3)
    grid, plan = reconstruction_grid(sources[0], imgs, 0.75, 0)
    masked = grid[:, :8].reshape(3, 2, 4, 2, 4, 3).transpose(0, 1, 3, 2, 4, 5).reshape(3, 4, -1)
    assert ((np.abs(masked).sum(-1) > 0).sum(1) <= plan.b).all()
    assert np.array_equal(grid[:, 24:], imgs.images.transpose(0, 2, 3, 1).reshape(24, 8, 3))


def test_reconstruction_grid_no_masking(sources, toy):
    imgs = toy.take(np.arange(2))
    grid, _ = reconstruction_grid(sources[0], imgs, 0.0, 0)
    truth = imgs.images.transpose(0, 2, 3, 1).reshape(16, 8, 3)
    assert np.array_equal(grid[:, :8], truth)
    recon = reconstruct(sources[0], patchify(imgs, 4), sample_mask(2, 4, 0.0, FIXED, 0))
    expected = unpatchify(recon).images.transpose(0, 2, 3, 1).reshape(16, 8, 3)
    # token order differs between the two plans, so sums round differently
    np.testing.assert_allclose(grid[:, 16:24], expected, atol=1e-5)


def test_footprint_formulas():
    assert linear_params(5, 7) == 42
    d = 16
    # widening d_ff from d to 2d adds d*d weights to each MLP matrix and d to the first bias
    assert block_params(d, 2 * d) - block_params(d, d) == 2 * d * d + d
    # mlp share doubles exactly with d_ff
    mlp = lambda f: linear_params(d, f) + linear_params(f, d) - d
    assert mlp(64) == 2 * mlp(32)


@pytest.mark.parametrize("d,ratio,depth", [(16, 2, 1), (8, 4, 2), (24, 1, 3)])
def test_footprint_matches_hand_count(d, ratio, depth):
    cfg = MaeConfig(Geometry(8, 8, 4, 3), d_enc=d, d_dec=8, enc_heads=2, dec_heads=2, mlp_ratio=ratio)
    clf = fresh_classifier(cfg, depth, 4, 0)
    pd, n = 48, 4
    blk = 4 * (d * d + d) + 4 * d + (d * ratio * d + ratio * d) + (ratio * d * d + d)
    hand = pd * d + d + n * d + depth * blk + 2 * d + d * 4 + 4
    assert model_footprint(clf)[0] == hand


def test_pretrain_model_smaller_than_cascade():
    mae = init_mae(MaeConfig(), 0)
    p1, _ = model_footprint(mae)
    for D in (2, 3, 5):
        clf = fresh_classifier(MaeConfig(), D, 4, 0)
        assert p1 < model_footprint(clf)[0]
