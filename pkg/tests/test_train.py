import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medivista import train as T
from medivista.config import AugmentConfig, ModelConfig, TrainConfig
from medivista.model import MediViSTA
from medivista.phantom import PhantomParams, make_records, read_dataset, write_dataset
from medivista.tensor import NonFiniteError, Tensor


def tiny_model_cfg(frames=4):
    return ModelConfig(embed_dim=16, frames=frames, image_size=(32, 32), ffm_channels=(4, 4, 4, 4))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    base = PhantomParams(frames=8, size=(32, 32))
    write_dataset(make_records(6, seed=2, base=base), root, ratios=(0.5, 0.25, 0.25), seed=2)
    return read_dataset(root, "train"), read_dataset(root, "val")


# ---- clip sampling ----


def test_clip_plain():
    video = np.arange(14.0).reshape(1, 14, 1, 1)
    labels = {0: np.zeros((1, 1)), 7: np.ones((1, 1))}
    clip, lab, idx = T.sample_clip(video, 0, 7, 8, labels)
    assert idx == list(range(8))
    assert lab.labeled_frames == [0, 7]
    np.testing.assert_array_equal(clip[0, :, 0, 0], np.arange(8.0))


def test_clip_wraps_cyclically():
    assert T.clip_indices(6, 0, 3, 8) == [0, 1, 2, 3, 4, 5, 0, 1]


def test_clip_long_span_keeps_both_labels():
    idx = T.clip_indices(20, 2, 15, 8)
    assert idx[0] == 2 and idx[-1] == 15 and len(idx) == 8
    assert idx == sorted(idx)


@pytest.mark.parametrize("ed,es", [(3, 3), (4, 2), (0, 9)])
def test_clip_index_errors(ed, es):
    with pytest.raises(ValueError):
        T.clip_indices(8, ed, es, 4)


def test_clip_too_short_video():
    with pytest.raises(ValueError, match="2 frames"):
        T.clip_indices(1, 0, 0, 4)


def test_sparse_labels_bounds():
    with pytest.raises(ValueError):
        T.SparseLabels({5: np.zeros((2, 2))}, 4)


# ---- masked loss ----


def _logits(rng, B=1, K=3, T_=4, H=6, W=6):
    return Tensor(rng.normal(size=(B, K, T_, H, W)), requires_grad=True)


def test_all_labeled_equals_unmasked(rng):
    logits = _logits(rng, B=2)
    masks = rng.integers(0, 3, size=(2, 4, 6, 6))
    labels = [T.SparseLabels({t: masks[b, t] for t in range(4)}, 4) for b in range(2)]
    assert T.masked_loss(logits, labels).item() == pytest.approx(T.unmasked_loss(logits, masks).item(), rel=1e-14)


def test_perfect_logits_small_loss(rng):
    masks = rng.integers(0, 3, size=(4, 6, 6))
    onehot = np.moveaxis(np.eye(3)[masks], -1, 0)[None]  # 1, K, T, H, W
    logits = Tensor(onehot * 40.0 - 20.0)
    assert T.masked_loss(logits, T.SparseLabels({0: masks[0], 3: masks[3]}, 4)).item() < 1e-3


def test_unlabeled_frames_get_zero_gradient(rng):
    logits = _logits(rng)
    T.masked_loss(logits, T.SparseLabels({1: rng.integers(0, 3, size=(6, 6))}, 4)).backward()
    g = logits.grad
    assert np.all(g[:, :, [0, 2, 3]] == 0.0)
    assert np.any(g[:, :, 1] != 0.0)


def test_no_supervision_error(rng):
    with pytest.raises(ValueError, match="no supervision in clip"):
        T.masked_loss(_logits(rng), T.SparseLabels({}, 4))


@given(st.integers(0, 2**31 - 1))
def test_masking_exactness(seed):
    r = np.random.default_rng(seed)
    data = r.normal(size=(1, 3, 4, 5, 5))
    masks = {t: r.integers(0, 3, size=(5, 5)) for t in (0, 2, 3)}

    def grad(labels):
        x = Tensor(data.copy(), requires_grad=True)
        T.masked_loss(x, T.SparseLabels(labels, 4)).backward()
        return x.grad

    full = grad(masks)
    dropped = grad({t: masks[t] for t in (0, 3)})
    assert np.all(dropped[:, :, 2] == 0)
    # remaining frames keep their per-frame gradient up to the 3/2 renormalisation of the mean
    np.testing.assert_allclose(dropped[:, :, [0, 3]], full[:, :, [0, 3]] * 1.5, atol=1e-14)


# ---- augmentation ----


def test_flip_is_pixel_exact(rng):
    clip = rng.uniform(size=(1, 4, 8, 8))
    mask = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
    cfg = AugmentConfig(flip=True, scale=False, contrast=False)
    for seed in range(6):
        out, lab = T.augment(clip, T.SparseLabels({0: mask}, 4), np.random.default_rng(seed), cfg)
        flipped = not np.array_equal(out, clip)
        ref_img = clip[..., ::-1] if flipped else clip
        ref_mask = mask[:, ::-1] if flipped else mask
        np.testing.assert_array_equal(out, ref_img)
        np.testing.assert_array_equal(lab.masks[0], ref_mask)


def test_scale_keeps_mask_labels_and_range(rng):
    clip = rng.uniform(size=(1, 2, 16, 16))
    mask = np.zeros((16, 16), np.uint8)
    mask[4:12, 5:11] = 2
    cfg = AugmentConfig(flip=False, scale=True, contrast=True)
    out, lab = T.augment(clip, T.SparseLabels({1: mask}, 2), np.random.default_rng(0), cfg)
    assert set(np.unique(lab.masks[1])) <= {0, 2}
    assert out.min() >= 0 and out.max() <= 1
    assert out.shape == clip.shape


def test_augment_off_is_identity(rng):
    clip = rng.uniform(size=(1, 2, 8, 8))
    m = np.ones((8, 8), np.uint8)
    out, lab = T.augment(clip, T.SparseLabels({0: m}, 2), rng, AugmentConfig(False, False, False))
    np.testing.assert_array_equal(out, clip)


def test_keyed_rng_streams():
    a = T.keyed_rng(0, 1, 2).random(3)
    assert np.array_equal(a, T.keyed_rng(0, 1, 2).random(3))
    assert not np.array_equal(a, T.keyed_rng(0, 2, 1).random(3))


# ---- optimizer ----


def test_adamw_zero_grad_zero_decay_is_noop(rng):
    p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    before = p.data.copy()
    opt = T.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros_like(p.data)
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adamw_first_step_is_sign_times_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.3, -5.0])
    T.AdamW({"p": p}, lr=0.01, weight_decay=0.0, eps=0.0).step()
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-15)


def test_adamw_decoupled_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    T.AdamW({"p": p}, lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adamw_skips_frozen():
    p = Tensor(np.array([1.0]), requires_grad=False)
    p.grad = np.array([1.0])
    T.AdamW({"p": p}, lr=0.1).step()
    assert p.data[0] == 1.0


# ---- loop, checkpoints ----


def _train_cfg(**kw):
    base = dict(epochs=1, pretrain_epochs=0, batch_size=2, clip_len=4, learning_rate=2e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_smoke_one_epoch(tiny_data, tmp_path):
    train, val = tiny_data
    res = T.train_loop(train[:2], val, MediViSTA(tiny_model_cfg()), _train_cfg(), tmp_path)
    assert np.isfinite(res.history[0]["train_loss"])
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_dice", "wall_seconds"]
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_deterministic_loss_curves(tiny_data):
    train, val = tiny_data
    curves = []
    for _ in range(2):
        res = T.train_loop(train, val, MediViSTA(tiny_model_cfg()), _train_cfg(epochs=2))
        curves.append([(h["train_loss"], h["val_dice"]) for h in res.history])
    assert curves[0] == curves[1]


def test_pretrain_then_frozen_backbone(tiny_data):
    train, val = tiny_data
    m = MediViSTA(tiny_model_cfg())
    res = T.train_loop(train, val, m, _train_cfg(epochs=1, pretrain_epochs=1))
    assert [h["phase"] for h in res.history] == ["pretrain", "finetune"]
    assert not any(t.requires_grad for k, t in m.weights.items() if k.startswith("backbone."))
    assert res.best_epoch == 2


def test_clip_len_must_match_model(tiny_data):
    train, val = tiny_data
    with pytest.raises(ValueError, match="frames"):
        T.train_loop(train, val, MediViSTA(tiny_model_cfg(frames=6)), _train_cfg())


def test_divergence_keeps_last_good_checkpoint(tiny_data, tmp_path, monkeypatch):
    train, val = tiny_data
    m = MediViSTA(tiny_model_cfg())
    real = T.run_epoch
    snapshot = {}

    def flaky(model, opt, items, cfg, epoch):
        if epoch == 2:
            for t in model.weights.values():
                t.data[...] = np.nan
            raise NonFiniteError("op 'add' produced non-finite values")
        loss = real(model, opt, items, cfg, epoch)
        snapshot.update({k: t.data.copy() for k, t in model.weights.items()})
        return loss

    monkeypatch.setattr(T, "run_epoch", flaky)
    with pytest.raises(T.TrainingDiverged) as info:
        T.train_loop(train, val, m, _train_cfg(epochs=3), tmp_path)
    restored, _, _ = T.load_checkpoint(info.value.checkpoint)
    for k, v in snapshot.items():
        np.testing.assert_array_equal(restored.weights[k].data, v)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = MediViSTA(tiny_model_cfg())
    m.freeze_backbone()
    opt = T.AdamW(m.weights, lr=1e-3)
    for t in m.trainable().values():
        t.grad = rng.normal(size=t.shape)
    opt.step()
    T.save_checkpoint(tmp_path / "ck", m, opt, extra={"note": 1})
    m2, opt2, extra = T.load_checkpoint(tmp_path / "ck")
    assert extra == {"note": 1}
    assert dataclasses.asdict(m2.cfg) == dataclasses.asdict(m.cfg)
    for k, t in m.weights.items():
        assert m2.weights[k].data.tobytes() == t.data.tobytes()
        assert m2.weights[k].requires_grad == t.requires_grad
    assert opt2.step_count == 1 and set(opt2.m) == set(opt.m)
    import json
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert "fact" in manifest["sections"] and "fact.u" in manifest["sections"]["fact"]
