import os

import numpy as np
import pytest

from dualpatch.data import (ImagePair, SyntheticConfig, box_to_label, clip_around, gen_synthetic_dataset,
                            label_to_box, load_dataset, load_pairs, multiscale_clip, parse_labels,
                            synthesize_scene)
from dualpatch.errors import LabelParseError, PairingError, ParameterDomainError, ShapeError
from dualpatch.thermal import render_synthetic_ir


def test_label_conversion_roundtrip():
    hw = (60, 80)
    box = (10.0, 5.0, 30.0, 45.0)
    lab = box_to_label(box, hw)
    assert lab == pytest.approx((0.25, 25 / 60, 0.25, 40 / 60))
    assert label_to_box(lab, hw) == pytest.approx(box)


def test_parse_labels_errors(tmp_path):
    good = tmp_path / "g.txt"
    good.write_text("0 0.5 0.5 0.25 0.5\n\n")
    assert parse_labels(good, (40, 40)) == [(0, pytest.approx((15.0, 10.0, 25.0, 30.0)))]
    bad = tmp_path / "b.txt"
    bad.write_text("0 0.5 0.5 0.25 0.5\n0 0.5 x 0.1 0.1\n")
    with pytest.raises(LabelParseError) as info:
        parse_labels(bad, (40, 40))
    assert ":2:" in str(info.value)


def test_pair_alignment_checked():
    with pytest.raises(ShapeError):
        ImagePair(np.zeros((4, 4, 3)), np.zeros((4, 5, 1)))


def test_synthetic_scene_consistency():
    cfg = SyntheticConfig(image_size=64)
    pair = synthesize_scene(np.random.default_rng(0), cfg, "x")
    assert pair.visible.shape == (64, 64, 3) and pair.infrared.shape == (64, 64, 1)
    np.testing.assert_allclose(pair.infrared, render_synthetic_ir(pair.visible, cfg.scene, cfg.camera))
    assert cfg.min_vehicles <= len(pair.boxes) <= cfg.max_vehicles
    for _, (x1, y1, x2, y2) in pair.boxes:
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64


def test_road_ground_keeps_paint_law_on_vehicles_only():
    cfg = SyntheticConfig(image_size=64, ground_types=("road",))
    pair = synthesize_scene(np.random.default_rng(0), cfg, "x")
    painted = render_synthetic_ir(pair.visible, cfg.scene, cfg.camera)
    mask = np.zeros((64, 64), dtype=bool)
    for _, (x1, y1, x2, y2) in pair.boxes:
        mask[int(y1):int(y2), int(x1):int(x2)] = True
    np.testing.assert_allclose(pair.infrared[mask], painted[mask])
    # dark road material runs cooler than dark paint would
    assert pair.infrared[~mask].mean() < painted[~mask].mean() - 0.03


def test_unknown_ground_type_rejected():
    with pytest.raises(ParameterDomainError):
        SyntheticConfig(ground_types=("lava",))


def test_generation_is_byte_identical(tmp_path):
    cfg = SyntheticConfig(image_size=32, n_boards=1, board_size=16)
    gen_synthetic_dataset(5, cfg, rng_seed=3, out_root=tmp_path / "a")
    gen_synthetic_dataset(5, cfg, rng_seed=3, out_root=tmp_path / "b")
    files = sorted(os.path.relpath(os.path.join(d, f), tmp_path / "a")
                   for d, _, fs in os.walk(tmp_path / "a") for f in fs)
    assert any(f.endswith(".png") for f in files)
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_load_roundtrip_and_split(tmp_path):
    cfg = SyntheticConfig(image_size=32, n_boards=0)
    mans = gen_synthetic_dataset(10, cfg, rng_seed=0, out_root=tmp_path)
    assert [m.split for m in mans] == ["train", "val"]
    assert len(mans[0]) == 8 and len(mans[1]) == 2
    pairs = load_pairs(tmp_path, "train")
    ref = synthesize_scene(np.random.default_rng([0, 0]), cfg, "000000")
    # 8-bit storage and 6-decimal labels
    np.testing.assert_allclose(pairs[0].visible, ref.visible, atol=0.5 / 255 + 1e-9)
    np.testing.assert_allclose(np.array(pairs[0].gt_boxes), np.array(ref.gt_boxes), atol=1e-3)
    assert len(load_pairs(tmp_path, "train", limit=3)) == 3


def test_missing_counterpart_raises_pairing_error(tmp_path):
    gen_synthetic_dataset(3, SyntheticConfig(image_size=16, n_boards=0, val_fraction=0.0), out_root=tmp_path)
    os.remove(tmp_path / "train" / "infrared" / "000001.png")
    with pytest.raises(PairingError) as info:
        load_dataset(tmp_path, "train")
    assert "000001" in str(info.value)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "nope")


def _pair_with_box():
    vis = np.random.default_rng(0).uniform(size=(64, 64, 3))
    return ImagePair(vis, render_synthetic_ir(vis), [(0, (20.0, 24.0, 30.0, 32.0)), (0, (50.0, 50.0, 60.0, 62.0))],
                     "p")


def test_multiscale_clip_keeps_target_inside():
    pair = _pair_with_box()
    crops = multiscale_clip(pair, (2, 4), rng_seed=0, out_size=(40, 40))
    assert len(crops) == 4
    for c in crops:
        assert c.visible.shape == (40, 40, 3) and c.infrared.shape == (40, 40, 1)
        assert len(c.boxes) >= 1
        for _, (x1, y1, x2, y2) in c.boxes:
            assert -1e-9 <= x1 < x2 <= 40 + 1e-9 and -1e-9 <= y1 < y2 <= 40 + 1e-9


def test_clip_factor_one_is_exact_box():
    pair = _pair_with_box()
    c = clip_around(pair, 0, 1, np.random.default_rng(0), out_size=(8, 10))
    assert c.boxes[0][1] == pytest.approx((0.0, 0.0, 10.0, 8.0))
    np.testing.assert_allclose(c.visible, pair.visible[24:32, 20:30], atol=1e-12)


def test_multiscale_clip_deterministic_and_validated():
    pair = _pair_with_box()
    a = multiscale_clip(pair, (3,), rng_seed=5, out_size=(16, 16))
    b = multiscale_clip(pair, (3,), rng_seed=5, out_size=(16, 16))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.visible, y.visible)
    with pytest.raises(ParameterDomainError):
        multiscale_clip(pair, (0.5,))
    with pytest.raises(ParameterDomainError):
        multiscale_clip(ImagePair(pair.visible, pair.infrared, [], "e"))
