import dataclasses
import warnings

import numpy as np
import pytest
import torch

from dualpatch.attack import (AttackConfig, Patch, PatchAttack, apply_patch, batch_loss, init_patch, load_patch,
                              save_patch, train_patch)
from dualpatch.compositor import EotConfig, placement_from_bbox
from dualpatch.errors import CapabilityError, FormatError, ParameterDomainError
from dualpatch.detectors import register_external
from dualpatch.losses import LossWeights
from dualpatch.thermal import render_synthetic_ir

FAST = AttackConfig(patch_size=8, iterations=3, batch_size=4, coverage_cap=0.5)


def test_config_validation_and_hash():
    assert AttackConfig(weights={"gamma": 1.0}).weights == LossWeights(1.0, 1.0, "sum")
    assert AttackConfig().hash() == AttackConfig().hash()
    assert AttackConfig().hash() != AttackConfig(seed=1).hash()
    for bad in (dict(patch_size=0), dict(learning_rate=0.0), dict(optimizer="lbfgs"), dict(init_mode="zeros"),
                dict(coverage_cap=1.5), dict(aug_prob=2.0)):
        with pytest.raises(ParameterDomainError):
            AttackConfig(**bad)


def test_init_patch_modes():
    gray = init_patch(dataclasses.replace(FAST, init_mode="gray")).pixels
    assert np.all(gray == 0.5) and gray.shape == (8, 8, 3)
    a, b = init_patch(FAST), init_patch(FAST)
    assert a.checksum() == b.checksum()
    assert 0.0 <= a.pixels.min() and a.pixels.max() <= 1.0
    assert a.checksum() != init_patch(dataclasses.replace(FAST, seed=1)).checksum()


def test_training_projects_and_is_deterministic(small_pairs, small_victim, small_adapter):
    cfg = dataclasses.replace(FAST, learning_rate=0.5)
    p1, h1 = train_patch(small_pairs, small_victim, small_adapter, cfg)
    p2, _ = train_patch(small_pairs, small_victim, small_adapter, cfg)
    assert p1.checksum() == p2.checksum()
    assert len(h1) == 3
    assert all(0.0 <= h["min_pixel"] and h["max_pixel"] <= 1.0 for h in h1)
    assert p1.metadata["config_hash"] == cfg.hash()
    assert p1.checksum() != init_patch(cfg).checksum()


def test_infrared_gradient_flows_through_adapter(small_pairs, small_victim, small_adapter):
    # only the infrared score term: any gradient must come through the adapter
    cfg = dataclasses.replace(FAST, weights=LossWeights(0.0, 1.0), eot=EotConfig.identity(), use_augmentation=False)
    patch = torch.tensor(init_patch(cfg).pixels, requires_grad=True)
    batch = small_pairs[:4]
    _, parts = batch_loss(patch, batch, small_victim, small_adapter, cfg)
    assert parts["n_infrared"] > 0

    vis_only = dataclasses.replace(cfg, use_adapter=False)
    loss_v, _ = batch_loss(patch, batch, small_victim, small_adapter, vis_only)
    loss_b, _ = batch_loss(patch, batch, small_victim, small_adapter, cfg)
    (gv,) = torch.autograd.grad(loss_v, patch)
    (gb,) = torch.autograd.grad(loss_b, patch)
    assert float((gb - gv * parts["n_visible"] / (parts["n_visible"] + parts["n_infrared"])).abs().sum()) > 0


def test_no_adapter_variant_ignores_infrared(small_pairs, small_victim):
    cfg = dataclasses.replace(FAST, use_adapter=False)
    _, hist = train_patch(small_pairs, small_victim, None, cfg)
    assert all(h["n_infrared"] == 0 for h in hist)


def test_training_preconditions(small_pairs, small_victim):
    with pytest.raises(ParameterDomainError):
        train_patch(small_pairs, small_victim, None, FAST)
    with pytest.raises(ParameterDomainError):
        train_patch([dataclasses.replace(small_pairs[0], boxes=[])], small_victim, None,
                    dataclasses.replace(FAST, use_adapter=False))
    ext = register_external({"id": "fixed", "modality": "dual", "plugin": "test_detectors:fixed_plugin"})
    with pytest.raises(CapabilityError):
        train_patch(small_pairs, ext, None, FAST)


def test_apply_patch_sources(small_pairs, small_adapter):
    pair = small_pairs[0]
    patch = Patch(np.zeros((8, 8, 3)))
    out = apply_patch(pair, patch, ir_source="physics", coverage_cap=0.5)
    pl = placement_from_bbox(pair.gt_boxes[0], 0.5)
    x0, y0 = pl.top_left
    side = pl.patch_side
    assert np.all(out.visible[y0:y0 + side, x0:x0 + side] == 0.0) or side != 8
    black_ir = float(render_synthetic_ir(np.zeros((1, 1, 3)))[0, 0, 0])
    assert np.isclose(out.infrared, black_ir).sum() >= min(side, 8) ** 2
    untouched = apply_patch(pair, patch, ir_source="none", coverage_cap=0.5)
    np.testing.assert_array_equal(untouched.infrared, pair.infrared)
    adapted = apply_patch(pair, patch, ir_source="adapter", adapter=small_adapter, coverage_cap=0.5)
    assert adapted.visible.shape == pair.visible.shape
    with pytest.raises(ParameterDomainError):
        apply_patch(pair, patch, ir_source="thermal")


def test_estimator_wrapper(small_pairs, small_victim, small_adapter):
    est = PatchAttack.from_config(FAST, victim=small_victim, adapter=small_adapter)
    assert est.config() == FAST
    out = est.fit(small_pairs[:6]).transform(small_pairs[:2])
    assert len(out) == 2 and est.patch_.size == 8
    direct, _ = train_patch(small_pairs[:6], small_victim, small_adapter, FAST)
    assert direct.checksum() == est.patch_.checksum()


def test_save_load_with_metadata(tmp_path):
    cfg = FAST
    patch = init_patch(cfg)
    path = str(tmp_path / "p.png")
    save_patch(patch, path, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        loaded = load_patch(path, expected_config=cfg)
    assert loaded.metadata["warnings"] == []
    np.testing.assert_allclose(loaded.pixels, patch.pixels, atol=0.5 / 255 + 1e-12)
    assert load_patch(path).pixels.tobytes() == loaded.pixels.tobytes()


def test_load_warnings_and_errors(tmp_path):
    path = str(tmp_path / "p.png")
    save_patch(init_patch(FAST), path, FAST)
    with pytest.warns(UserWarning, match="hash mismatch"):
        p = load_patch(path, expected_config=dataclasses.replace(FAST, seed=9))
    assert any("mismatch" in w for w in p.metadata["warnings"])
    (tmp_path / "p.png.json").unlink()
    with pytest.warns(UserWarning, match="missing sidecar"):
        load_patch(path)
    (tmp_path / "bad.png").write_bytes(b"\x89PNG broken")
    with pytest.raises(FormatError):
        load_patch(str(tmp_path / "bad.png"))
    with pytest.raises(FileNotFoundError):
        load_patch(str(tmp_path / "nope.png"))
    (tmp_path / "afile").write_text("x")
    with pytest.raises(OSError):
        save_patch(init_patch(FAST), str(tmp_path / "afile" / "p.png"))
