import colorsys
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stainsep import autodiff as ad
from stainsep import io
from stainsep.encoder import EncoderConfig, build_encoder, encode
from stainsep.losses import LossWeights
from stainsep.baseline import nnls_unmix
from stainsep.stains import StainMatrix, normalize_columns
from stainsep.synth import default_panel_spec, generate_corpus
from stainsep.trainer import (Adam, ConfigError, HueMaskSpec, NonFiniteLossError, PatchIndex,
                              TrainConfig, inverse_softplus, init_stain_matrix, ingest_patches,
                              load_model, make_hue_mask, objective, rgb_hue, separate,
                              sparsity_scale, stains_from_params, stains_from_swatches,
                              tissue_fraction, train, warm_start_objective)

TINY = dict(K=5, base_channels=4, residual_blocks=1)


def softplus(x):
    return np.log1p(np.exp(x))


def brute_otsu(values):
    """Threshold maximising between-class variance over all distinct levels."""
    v = np.sort(values.ravel())
    best, best_t = -1.0, v[0]
    for t in np.unique(v)[:-1]:
        lo, hi = v[v <= t], v[v > t]
        w0, w1 = lo.size / v.size, hi.size / v.size
        var = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


@pytest.fixture(scope="module")
def scenes():
    spec = default_panel_spec(height=32, width=32)
    return [c[0] for c in generate_corpus(spec, 6, seed=0)]


def tiny_config(**kw):
    base = dict(steps=3, batch_size=2, crop=16, encoder=EncoderConfig(**TINY), perceptual=False)
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------- hue masks

def test_white_pixel_is_not_masked():
    spec = HueMaskSpec.for_stain(StainMatrix.initial_panel(), "CD8")
    assert not make_hue_mask(np.ones((2, 2, 3)), spec).any()


def test_rendered_cd8_pixel_is_masked():
    col = np.array([0.300, 0.491, 0.818])
    col = col / np.linalg.norm(col)
    pixel = np.exp(-2 * col)
    spec = HueMaskSpec.for_stain(StainMatrix.initial_panel(), "CD8")
    h, s, v = colorsys.rgb_to_hsv(*pixel)
    assert spec.hue_center == pytest.approx(h * 360.0, abs=1e-9)
    assert make_hue_mask(pixel.reshape(1, 1, 3), spec).all()


def test_hue_boundary():
    spec = HueMaskSpec("CD8", hue_center=200.0, hue_tolerance=15.0)
    inside = np.array(colorsys.hsv_to_rgb(214.0 / 360, 0.8, 0.5)).reshape(1, 1, 3)
    outside = np.array(colorsys.hsv_to_rgb(216.0 / 360, 0.8, 0.5)).reshape(1, 1, 3)
    wrap = HueMaskSpec("H", hue_center=355.0, hue_tolerance=15.0)
    across = np.array(colorsys.hsv_to_rgb(5.0 / 360, 0.8, 0.5)).reshape(1, 1, 3)
    assert make_hue_mask(inside, spec).all()
    assert not make_hue_mask(outside, spec).any()
    assert make_hue_mask(across, wrap).all()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)))
def test_hue_mask_is_pure(x):
    spec = HueMaskSpec("CD8", 210.0)
    copy = x.copy()
    a, b = make_hue_mask(x, spec), make_hue_mask(x, spec)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(x, copy)


def test_hue_spec_validation():
    with pytest.raises(ConfigError):
        HueMaskSpec("CD8", 200.0, hue_tolerance=0)


# ------------------------------------------------------------ stain params

def test_inverse_softplus_examples():
    assert inverse_softplus(0.033) == pytest.approx(math.log(math.expm1(0.033)), abs=1e-12)
    assert inverse_softplus(0.033) == pytest.approx(-3.3947, abs=1e-4)
    S = StainMatrix.initial_panel()
    np.testing.assert_allclose(softplus(init_stain_matrix(S)), S.columns, atol=1e-6)
    u = init_stain_matrix(np.array([[0.0, 1.0], [0.5, 0.2], [0.3, 0.1]]))
    assert softplus(u[0, 0]) == pytest.approx(1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 50))
def test_softplus_inverse_identity(y):
    assert softplus(inverse_softplus(y)) == pytest.approx(y, rel=1e-9)


def test_stains_from_swatches_and_params():
    S = normalize_columns(StainMatrix.initial_panel())
    swatches = np.exp(-S.columns.T)
    np.testing.assert_allclose(stains_from_swatches(swatches).columns, S.columns, atol=1e-12)
    back = stains_from_params(init_stain_matrix(S), S.names)
    np.testing.assert_allclose(back.columns, S.columns, atol=1e-9)


# --------------------------------------------------------------- ingestion

def test_tissue_fraction_extremes():
    assert tissue_fraction(np.ones((8, 8, 3))) == 0.0
    assert tissue_fraction(np.full((8, 8, 3), 0.1)) == 1.0


def test_half_tissue_follows_otsu_and_the_half_rule(tmp_path):
    rng = np.random.default_rng(0)
    img = np.empty((16, 16, 3))
    img[:8] = 0.25 + rng.random((8, 16, 1)) * 0.1
    img[8:] = 0.85 + rng.random((8, 16, 1)) * 0.1
    lum = img.mean(axis=-1)
    frac = float(np.mean(lum <= brute_otsu(lum)))
    assert tissue_fraction(img) == pytest.approx(frac)
    assert frac == 0.5
    less = img.copy()
    less[7, 0] = 0.95  # one tissue pixel becomes background
    io.write_image(tmp_path / "half.png", img)
    io.write_image(tmp_path / "less.png", less)
    io.write_image(tmp_path / "white.png", np.ones((16, 16, 3)))
    io.write_image(tmp_path / "dark.png", np.full((16, 16, 3), 0.2))
    index = ingest_patches(tmp_path)
    assert sorted(p.name for p in index.paths) == ["dark.png", "half.png"]


def test_ingest_skips_unreadable_and_rejects_empty(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not a png")
    io.write_image(tmp_path / "white.png", np.ones((8, 8, 3)))
    with pytest.warns(UserWarning, match="broken.png"), pytest.raises(ValueError, match="no tissue"):
        ingest_patches(tmp_path)


def test_patch_index_text_roundtrip(tmp_path):
    idx = PatchIndex([tmp_path / "a.png", tmp_path / "b.png"], [0.6, 0.9])
    back = PatchIndex.from_text(idx.to_text())
    assert back.paths == idx.paths and back.tissue_fractions == idx.tissue_fractions


# ------------------------------------------------------------------ config

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"steps": 1, "bogus": 2})
    with pytest.raises(ConfigError, match="lamda_ent"):
        TrainConfig.from_dict({"weights": {"lamda_ent": 0.1}})
    with pytest.raises(ConfigError, match="multiple of 4"):
        TrainConfig(crop=30)
    with pytest.raises(ConfigError, match="not a stain"):
        TrainConfig(hue_masks=[{"channel": "CD3", "hue_center": 200.0}])


def test_sparsity_ramp():
    cfg = TrainConfig(sparsity_warmup=10)
    assert [sparsity_scale(cfg, s) for s in (0, 5, 10, 50)] == [0.0, 0.5, 1.0, 1.0]
    assert sparsity_scale(TrainConfig(), 0) == 1.0



def test_sparsity_ramp_starts_after_warm_start():
    cfg = TrainConfig(sparsity_warmup=10, warm_start_steps=20)
    assert [sparsity_scale(cfg, s) for s in (0, 20, 25, 30, 99)] == [0.0, 0.0, 0.5, 1.0, 1.0]


def test_warm_start_config_validation():
    with pytest.raises(ConfigError, match="warm_start_steps"):
        TrainConfig(warm_start_steps=-1)
    cfg = TrainConfig.from_dict({"warm_start_steps": 5, "warm_start_lr": 1e-3})
    assert cfg.warm_start_steps == 5 and cfg.warm_start_lr == 1e-3

# ---------------------------------------------------------------- training

def test_zero_steps_returns_initialisation(scenes):
    cfg = tiny_config(steps=0)
    res = train(cfg, scenes)
    init_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    ref = build_encoder(cfg.encoder, int(init_seq.generate_state(1)[0]))
    assert res.checkpoint.step == 0 and res.history == []
    for k, v in ref.tensors.items():
        np.testing.assert_array_equal(res.checkpoint.params[k], v)
    np.testing.assert_allclose(res.stains.columns, cfg.initial_stains().columns, atol=1e-6)


def test_training_is_reproducible(scenes):
    a = train(tiny_config(), scenes)
    b = train(tiny_config(), scenes)
    assert a.csv() == b.csv()
    assert io.checkpoint_to_bytes(a.checkpoint) == io.checkpoint_to_bytes(b.checkpoint)
    assert a.csv().splitlines()[0] == "step,rec_l1,rec_perc,ent,col,ov,mask,total,n_tau,n_mask"
    assert len(a.csv().splitlines()) == 4


def test_resume_continues_step_counter(scenes):
    first = train(tiny_config(steps=2), scenes)
    more = train(tiny_config(steps=4), scenes, resume=first.checkpoint)
    assert more.checkpoint.step == 4 and len(more.history) == 2
    assert np.all(np.isfinite(more.checkpoint.stain_params))


def test_resume_matches_uninterrupted_run(scenes):
    whole = train(tiny_config(steps=4), scenes)
    half = train(tiny_config(steps=2), scenes)
    resumed = train(tiny_config(steps=4), scenes, resume=half.checkpoint)
    assert io.checkpoint_to_bytes(resumed.checkpoint) == io.checkpoint_to_bytes(whole.checkpoint)


def test_strong_colour_anchor_keeps_stains(scenes):
    cfg = tiny_config(steps=200, weights=LossWeights(lambda_col=1e3), lr=1e-2)
    S = train(cfg, scenes).stains.columns
    cos = np.sum(S * cfg.initial_stains().columns, axis=0)
    assert np.all(cos >= 0.999)


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_one_step_decreases_reconstruction(scenes, lr):
    cfg = tiny_config(weights=LossWeights(0, 0, 0, 0, perceptual_weight=0.0))
    S_tilde = cfg.initial_stains()
    enc = build_encoder(cfg.encoder, 0)
    params = {k: ad.Tensor(v, requires_grad=True) for k, v in enc.tensors.items()}
    u = ad.Tensor(init_stain_matrix(S_tilde).astype(np.float32), requires_grad=True)
    X = np.stack([s[:16, :16] for s in scenes[:2]])
    before = objective(cfg, params, u, X, S_tilde, None)
    before.total.backward()
    Adam(lr).step(dict(params, u=u))
    after = objective(cfg, params, u, X, S_tilde, None)
    assert after.report.rec_l1 < before.report.rec_l1


def test_non_finite_loss_dumps_batch(scenes, tmp_path):
    first = train(tiny_config(steps=0), scenes)
    first.checkpoint.params["head.b"][:] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train(tiny_config(steps=1, out_dir=str(tmp_path)), scenes, resume=first.checkpoint)
    assert info.value.step == 0
    assert info.value.dump.exists()
    assert np.load(info.value.dump)["batch"].shape == (2, 16, 16, 3)


def test_periodic_checkpoints(scenes, tmp_path):
    train(tiny_config(steps=4, checkpoint_every=2, out_dir=str(tmp_path)), scenes)
    assert sorted(p.name for p in tmp_path.glob("*.sqck")) == ["step000002.sqck", "step000004.sqck"]


# --------------------------------------------------------------- inference

def test_separate_single_crop_equals_encode(scenes):
    ck = train(tiny_config(steps=1), scenes).checkpoint
    x = np.random.default_rng(0).random((128, 128, 3))
    params, _ = load_model(ck)
    np.testing.assert_array_equal(separate(ck, x).values, encode(params, x).values)


def test_tiled_separation_matches_single_shot():
    cfg = EncoderConfig(K=5, base_channels=4, kernel_size=1)
    p = build_encoder(cfg, seed=3)
    ck = io.Checkpoint(cfg.to_dict(), p.tensors, init_stain_matrix(StainMatrix.initial_panel()),
                       ("H", "CDX2", "MUC2", "MUC5", "CD8"))
    x = np.random.default_rng(1).random((256, 256, 3))
    tiled = separate(ck, x).values
    whole = encode(p, x).values
    assert np.max(np.abs(tiled - whole)[16:-16, 16:-16]) < 1e-4


def test_separate_pads_and_checks_names(scenes):
    ck = train(tiny_config(steps=1), scenes).checkpoint
    out = separate(ck, np.random.default_rng(2).random((30, 22, 3)))
    assert out.values.shape == (30, 22, 5)
    with pytest.raises(ValueError, match="do not match"):
        separate(ck, np.ones((8, 8, 3)), names=["a", "b", "c", "d", "e"])


# -------------------------------------------------------------- warm start

def test_warm_start_objective_is_mse_to_nnls(scenes):
    cfg = tiny_config()
    S_tilde = cfg.initial_stains()
    params = {k: ad.Tensor(v, requires_grad=True)
              for k, v in build_encoder(cfg.encoder, 0).tensors.items()}
    u = ad.Tensor(init_stain_matrix(S_tilde), requires_grad=True)
    X = np.stack([s[:16, :16] for s in scenes[:2]])
    obj = warm_start_objective(objective(cfg, params, u, X, S_tilde, None), X, S_tilde)
    C = obj.concentrations.data.transpose(0, 2, 3, 1)
    T = np.stack([nnls_unmix(S_tilde, x).values for x in X])
    assert obj.report.total == pytest.approx(np.mean((C - T) ** 2), rel=1e-5)
    obj.total.backward()
    assert u.grad is None or not np.any(u.grad)


def test_warm_start_freezes_stains_and_fits_nnls(scenes):
    cfg = tiny_config(steps=30, warm_start_steps=30, warm_start_lr=5e-3)
    res = train(cfg, scenes)
    np.testing.assert_array_equal(res.checkpoint.stain_params,
                                  init_stain_matrix(cfg.initial_stains()).astype(np.float32))
    totals = [r.total for r in res.history]
    assert np.mean(totals[-5:]) < np.mean(totals[:5])
