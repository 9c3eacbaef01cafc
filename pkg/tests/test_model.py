import dataclasses

import numpy as np
import pytest

from medivista import model as M
from medivista.config import ConfigError, FacTConfig, KernelConfig, ModelConfig
from medivista.gradcheck import check_registered
from medivista.tensor import Tensor
from medivista.train import AdamW, masked_loss, SparseLabels
from medivista.wavelet import WaveletSubbands, haar_dwt2, haar_idwt2


def small(**kw):
    base = dict(embed_dim=16, frames=2, image_size=(16, 16), ffm_channels=(4, 4, 4, 4))
    base.update(kw)
    return ModelConfig(**base)


def video(rng, cfg, b=1):
    return rng.uniform(size=(b, cfg.in_channels, cfg.frames, *cfg.image_size))


def test_patch_embed_shape(rng):
    cfg = small()
    out = M.patch_embed(video(rng, cfg), cfg, M.init_weights(cfg))
    assert out.shape == (1, 2, 4, 16)


def test_patch_embed_zero(rng):
    cfg = small()
    w = M.init_weights(cfg)
    w["backbone.pos"].data[:] = 0
    assert not M.patch_embed(np.zeros((1, 1, 2, 16, 16)), cfg, w).data.any()


def test_patch16_on_64():
    cfg = ModelConfig(patch_size=16)
    assert cfg.num_tokens == 16
    out = M.patch_embed(np.zeros((1, 1, 8, 64, 64)), cfg, M.init_weights(cfg))
    assert out.shape[2] == 16


def test_indivisible_dims():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=(60, 64)).validate()
    cfg = small()
    with pytest.raises(ValueError, match="divisible"):
        M.patch_embed(np.zeros((1, 1, 2, 12, 16)), cfg, M.init_weights(cfg))


def test_ffm_branch_shapes(rng):
    cfg = ModelConfig()
    feats = M.ffm_branch(rng.uniform(size=(1, 64, 64)), cfg, M.init_weights(cfg))
    assert len(feats) == 4
    assert [f.shape[-1] for f in feats] == [16, 8, 4, 2]


def test_ffm_zero_frame():
    cfg = ModelConfig()
    assert all(not f.data.any() for f in M.ffm_branch(np.zeros((1, 64, 64)), cfg, M.init_weights(cfg)))


@pytest.mark.parametrize("band", ["ll", "lh", "hl", "hh"])
def test_ffm_sensitive_to_every_band(rng, band):
    cfg = ModelConfig()
    w = M.init_weights(cfg)
    frame = rng.uniform(size=(1, 64, 64))
    sb = haar_dwt2(frame)
    parts = {k: getattr(sb, k) for k in ("ll", "lh", "hl", "hh")}
    parts[band] = Tensor(np.zeros(parts[band].shape))
    probe = haar_idwt2(WaveletSubbands(**parts, padding=sb.padding)).data
    a = M.ffm_branch(frame, cfg, w)[-1].data
    b = M.ffm_branch(probe, cfg, w)[-1].data
    assert np.max(np.abs(a - b)) > 1e-6


def test_encoder_four_stages(rng):
    cfg = small()
    st = M.encoder_forward(video(rng, cfg), cfg, M.init_weights(cfg))
    assert len(st.stages) == 4 and st.stages[0].shape == (1, 2, 4, 16)


def test_encoder_skips_ffm_when_disabled(rng, monkeypatch):
    cfg = small(ffm_enabled=False)
    w = M.init_weights(cfg)
    assert not any(k.startswith("ffm.") for k in w)

    def boom(*a, **k):
        raise AssertionError("ffm branch evaluated")

    monkeypatch.setattr(M, "ffm_branch", boom)
    M.encoder_forward(video(rng, cfg), cfg, w)


def test_single_frame_order_equivalence(rng):
    cfg_t = small(frames=1)
    cfg_s = dataclasses.replace(cfg_t, attention_order="spatial_only")
    w = M.init_weights(cfg_t)
    v = video(rng, cfg_t)
    a = M.encoder_forward(v, cfg_t, w).stages[-1].data
    b = M.encoder_forward(v, cfg_s, w).stages[-1].data
    assert np.max(np.abs(a - b)) < 1e-10


def test_stage_features_contract():
    with pytest.raises(ValueError, match="4 stage"):
        M.StageFeatures([Tensor(np.zeros((1, 1, 4, 8)))] * 3)


def test_decoder_resolution_and_classes(rng):
    cfg = small()
    w = M.init_weights(cfg)
    st = M.encoder_forward(video(rng, cfg), cfg, w)
    out = M.decoder_forward(st, cfg, w)
    assert out.shape == (1, 3, 2, 16, 16)


def test_decoder_zero_in_zero_out():
    cfg = small()
    w = {k: Tensor(np.zeros(v.shape)) for k, v in M.init_weights(cfg).items()}
    zero = M.StageFeatures([Tensor(np.zeros((1, 2, 4, 16)))] * 4)
    assert not M.decoder_forward(zero, cfg, w).data.any()


def test_full_pipeline_shape_and_determinism(rng):
    cfg = ModelConfig()
    w = M.init_weights(cfg)
    v = rng.uniform(size=(1, 1, 8, 64, 64))
    a = M.medivista_forward(v, cfg, w).data
    b = M.medivista_forward(v, cfg, w).data
    assert a.shape == (1, 3, 8, 64, 64)
    assert a.tobytes() == b.tobytes()


def test_unnormalized_input_rejected():
    cfg = small()
    with pytest.raises(ValueError, match="normalized"):
        M.medivista_forward(np.full((1, 1, 2, 16, 16), 1.5), cfg, M.init_weights(cfg))


def test_end_to_end_gradcheck_wrt_core():
    (rep,) = check_registered(["medivista_forward"])
    assert rep.tol == 1e-4 and rep.passed


def test_sigma_moves_logits_and_backbone_stays_frozen(rng):
    cfg = small()
    m = M.MediViSTA(cfg)
    m.freeze_backbone()
    v = video(rng, cfg)
    base = m(v).data
    m.weights["fact.sigma.0.query"].data[:] = 0.3
    assert np.max(np.abs(m(v).data - base)) > 1e-8
    backbone = {k: t.data.copy() for k, t in m.weights.items() if k.startswith("backbone.")}
    labels = SparseLabels({0: rng.integers(0, 3, size=(16, 16))}, 2)
    opt = AdamW(m.weights, lr=1e-2)
    masked_loss(m(v), labels).backward()
    assert m.weights["fact.sigma.1.value"].grad is not None
    opt.step()
    for k, before in backbone.items():
        np.testing.assert_array_equal(m.weights[k].data, before)


def test_pretrain_mode_freezes_only_fact():
    m = M.MediViSTA(small())
    m.pretrain_mode()
    for k, t in m.weights.items():
        assert t.requires_grad == (not k.startswith("fact."))


def test_unknown_group():
    with pytest.raises(ValueError, match="unknown"):
        M.MediViSTA(small()).set_trainable(["encoder"])


VARIANTS = [
    {"attention_order": o} for o in ("temporal_first", "spatial_first", "spatial_only", "temporal_plain")
] + [
    {"temporal_adapter": a} for a in ("crossframe", "bifurcated", "conv3d")
] + [
    {"kernel": KernelConfig(type=t)} for t in ("laplacian", "bilateral")
] + [
    {"ffm_transform": "fourier"}, {"ffm_transform": "none"}, {"ffm_enabled": False},
    {"fact": FacTConfig(enabled=False)}, {"fact": FacTConfig(shared=False)},
    {"multiscale": False}, {"heads": 2}, {"depth": 8},
]


@pytest.mark.parametrize("kw", VARIANTS, ids=[",".join(f"{k}={v}" for k, v in d.items())[:40] for d in VARIANTS])
def test_ablation_switches_run(rng, kw):
    cfg = small(**kw)
    m = M.MediViSTA(cfg)
    out = m(video(rng, cfg, b=2))
    assert out.shape == (2, 3, 2, 16, 16)
    out.sum().backward()
