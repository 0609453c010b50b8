import csv

import numpy as np
import pytest
from scipy import ndimage

from dualpatch.attack import AttackConfig, Patch
from dualpatch.data import ImagePair
from dualpatch.detectors import register_external
from dualpatch.errors import ParameterDomainError, UndefinedASRError
from dualpatch.evaluation import (CSV_HEADER, SOLID_COLORS, AblationResult, AsrReport, TransferMatrix,
                                  ablation_suite, baseline_patches, compute_asr, emit_report,
                                  multiscale_test_split, threshold_sweep, transfer_eval)

LEVELS = (0.4, 0.6, 0.8)


def blob_detector(image, modality):
    """One detection per bright connected blob, scored by its median intensity."""
    m = image.max(axis=2).astype(np.float64) / 255.0
    labels, n = ndimage.label(m > 0.2)
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = sl
        score = float(np.median(m[sl][labels[sl] == k]))
        out.append((xs.start, ys.start, xs.stop, ys.stop, score, 0))
    return out


def blob_pairs(n=4):
    pairs = []
    for i in range(n):
        vis = np.zeros((64, 64, 3))
        boxes = []
        for j, v in enumerate(LEVELS):
            x = 4 + 20 * j
            vis[8:24, x:x + 16] = v
            boxes.append((0, (float(x), 8.0, float(x + 16), 24.0)))
        pairs.append(ImagePair(vis, vis[:, :, :1].copy(), boxes, f"b{i}"))
    return pairs


@pytest.fixture(scope="module")
def blob_victim():
    return register_external({"id": "blob", "modality": "dual", "plugin": "test_evaluation:blob_detector"})


BLACK = Patch(np.zeros((16, 16, 3)))


def test_asr_arithmetic():
    assert AsrReport("visible", 0.5, 10, 3).asr == pytest.approx(0.7)
    assert AsrReport("visible", 0.5, 4, 6).asr == pytest.approx(-0.5)
    with pytest.raises(UndefinedASRError):
        AsrReport("visible", 0.5, 0, 0)
    assert AsrReport("fused", 0.25, 8, 2, "full").row() == ("full", "fused", "0.2500", "8", "2", "0.750000")


def test_black_patch_hides_visible_but_not_physical_infrared(blob_victim):
    pairs = blob_pairs()
    reps = compute_asr(pairs, BLACK, blob_victim, threshold=0.5, coverage_cap=1.0)
    # visible: both objects above 0.5 are erased
    assert (reps["visible"].n_clean, reps["visible"].n_patch) == (8, 0)
    # infrared: the black patch renders hot, so every blob now clears 0.5
    assert (reps["infrared"].n_clean, reps["infrared"].n_patch) == (8, 12)
    assert reps["infrared"].asr == -0.5 and reps["fused"].asr == -0.5


def test_no_op_patch_gives_zero_asr(blob_victim):
    pairs = blob_pairs()
    reps = compute_asr(pairs, BLACK, blob_victim, threshold=0.3, coverage_cap=1.0, ir_source="none")
    assert reps["infrared"].asr == 0.0
    assert reps["visible"].asr == 1.0 and reps["fused"].asr == 0.0


def test_raw_mode_has_no_fused(blob_victim):
    reps = compute_asr(blob_pairs(2), BLACK, blob_victim, threshold=0.3, coverage_cap=1.0, matched=False)
    assert set(reps) == {"visible", "infrared"}


def test_matched_counts_never_exceed_raw(small_pairs, small_victim):
    patch = baseline_patches("random", 8)
    for thr in (0.05, 0.2):
        m = compute_asr(small_pairs[:8], patch, small_victim, thr, matched=True, coverage_cap=0.5)
        r = compute_asr(small_pairs[:8], patch, small_victim, thr, matched=False, coverage_cap=0.5)
        for mod in ("visible", "infrared"):
            assert m[mod].n_clean <= r[mod].n_clean and m[mod].n_patch <= r[mod].n_patch


def test_sweep_matches_single_calls(blob_victim):
    pairs = blob_pairs()
    thresholds = (0.3, 0.5, 0.7, 0.9)
    with pytest.raises(UndefinedASRError):
        threshold_sweep(pairs, BLACK, blob_victim, thresholds, coverage_cap=1.0)
    sweep = threshold_sweep(pairs, BLACK, blob_victim, thresholds[:3], coverage_cap=1.0)
    assert [r.n_clean for r in sweep if r.modality == "visible"] == [12, 8, 4]
    for r in sweep:
        single = compute_asr(pairs, BLACK, blob_victim, r.threshold, coverage_cap=1.0)[r.modality]
        assert single == r


def test_transfer_matrix(blob_victim):
    pairs = blob_pairs(2)
    other = register_external({"id": "blob2", "modality": "dual", "plugin": "test_evaluation:blob_detector"})
    patches = {"blob": BLACK, "blob2": baseline_patches("solid:white", 16)}
    tm = transfer_eval(patches, [blob_victim, other], pairs, 0.5, modality="visible", coverage_cap=1.0)
    assert tm.cells.shape == (2, 2)
    assert tm.cell("blob", "blob2") == 1.0
    # white lifts the dimmest blob over the threshold
    assert tm.cell("blob2", "blob") == -0.5
    np.testing.assert_array_equal(tm.diagonal, [1.0, -0.5])
    assert len(tm.reports()) == 4
    with pytest.raises(KeyError):
        transfer_eval({"blob": BLACK}, [blob_victim, other], pairs)


def test_baselines():
    r1, r2 = baseline_patches("random", 8, rng_seed=3), baseline_patches("random", 8, rng_seed=3)
    assert r1.checksum() == r2.checksum() and r1.pixels.shape == (8, 8, 3)
    for name, rgb in SOLID_COLORS.items():
        p = baseline_patches("solid", 4, color=name)
        assert np.all(p.pixels == np.array(rgb))
    assert np.all(baseline_patches("solid:yellow", 2).pixels == [1.0, 1.0, 0.0])
    assert np.all(baseline_patches("solid", 2, color=(0.1, 0.2, 0.3)).pixels[1, 1] == [0.1, 0.2, 0.3])
    for bad in (dict(kind="stripes"), dict(kind="solid", color="mauve"), dict(kind="solid", color=(1.0, 2.0, 0.0))):
        with pytest.raises(ParameterDomainError):
            baseline_patches(size=4, **bad)


def test_multiscale_split_size():
    pairs = blob_pairs(2)
    split = multiscale_test_split(pairs, (2, 3), rng_seed=0)
    assert len(split) == 2 * 3 * 2
    assert all(p.hw == (64, 64) for p in split)
    again = multiscale_test_split(pairs, (2, 3), rng_seed=0)
    assert all(np.array_equal(a.visible, b.visible) for a, b in zip(split, again))


def test_emit_report_is_deterministic(tmp_path, blob_victim):
    sweep = threshold_sweep(blob_pairs(2), BLACK, blob_victim, (0.3, 0.5), coverage_cap=1.0)
    a = emit_report(sweep, tmp_path / "a", "abc")
    b = emit_report(sweep, tmp_path / "b", "abc")
    assert [p.rsplit("/", 1)[1] for p in a] == ["asr_abc.csv", "asr_abc_sweep.png"]
    for x, y in zip(a, b):
        assert open(x, "rb").read() == open(y, "rb").read()
    with open(a[0]) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 1 + len(sweep)


def test_emit_report_transfer_and_errors(tmp_path):
    tm = TransferMatrix(["a", "b"], np.array([[0.5, 0.2], [0.1, 0.4]]))
    paths = emit_report(tm, tmp_path, "h", "transfer")
    assert paths[1].endswith("_heatmap.png")
    with pytest.raises(ParameterDomainError):
        emit_report([], tmp_path, "h")
    with pytest.raises(ParameterDomainError):
        emit_report(AblationResult([], {}, {}), tmp_path, "h")


def test_ablation_suite_runs_every_variant(small_pairs, small_victim, small_adapter):
    cfg = AttackConfig(patch_size=8, iterations=2, batch_size=4, coverage_cap=0.5)
    res = ablation_suite(small_pairs[:8], small_victim, small_adapter, cfg, small_pairs[8:], threshold=0.05)
    assert [r[0] for r in res.rows] == ["full", "no_adapter", "no_augmentation"]
    assert res.asr("full", "visible") == res.rows[0][1]
    assert len({p.checksum() for p in res.patches.values()}) == 3
