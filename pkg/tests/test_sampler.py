import cv2
import numpy as np
import pytest
from scipy import stats

from archtrace.core import DatasetManifest, LabelSpace, ManifestError, ManifestRecord
from archtrace.sampler import (PatchPlan, balanced_batches, batches_per_epoch,
                               equalize_then_magnify, grid_offsets,
                               grid_patch_at, grid_patches, preprocess,
                               reassemble_grid, sample_patch_offsets,
                               sample_patches, source_kind)
from helpers import synth_natural


class TestPreprocess:
    def test_celeba_crop(self):
        img = synth_natural(0, 256)[:218, :178]  # celebA-shaped 178x218 (w x h)
        out = preprocess(img, "celeba")
        assert out.shape == (128, 128, 3)
        assert (out == img[57:185, 25:153]).all()

    def test_generic_center_crop(self):
        img = synth_natural(1, 256)
        out = preprocess(img, "generic")
        assert out.shape == (128, 128, 3)
        assert (out == img[64:192, 64:192]).all()

    def test_128_passthrough(self):
        img = synth_natural(2, 128)
        assert preprocess(img, "generic") is img
        assert preprocess(img, "celeba") is img

    def test_native_any_size(self):
        img = synth_natural(3, 64)
        assert preprocess(img, "native") is img

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            preprocess(synth_natural(4, 64), "generic")

    def test_source_kind_mapping(self):
        assert source_kind("celeba") == "celeba"
        assert source_kind("zoo") == "native"
        assert source_kind("transforms") == "native"
        assert source_kind("lsun") == "generic"


class TestEqualizeThenMagnify:
    def test_128_to_512(self):
        out = equalize_then_magnify(synth_natural(0, 128), PatchPlan(512, 64))
        assert out.shape == (512, 512, 3)

    def test_equalize_route(self):
        img = synth_natural(1, 256)  # stands in for a large native image
        plan = PatchPlan(512, 64, low_res_equalize=128)
        out = equalize_then_magnify(img, plan)
        low = cv2.resize(img, (128, 128), interpolation=cv2.INTER_LINEAR)
        expect = np.clip(cv2.resize(low, (512, 512), interpolation=cv2.INTER_LINEAR), 0, 1)
        assert (out == expect).all()
        direct = cv2.resize(img, (512, 512), interpolation=cv2.INTER_LINEAR)
        assert not (out == direct).all()

    def test_identity_when_sized(self):
        img = synth_natural(2, 128)
        out = equalize_then_magnify(img, PatchPlan(128, 64))
        assert (out == img).all()

    def test_deterministic(self):
        img = synth_natural(3, 128)
        plan = PatchPlan(512, 64)
        assert (equalize_then_magnify(img, plan) == equalize_then_magnify(img, plan)).all()


class TestPatches:
    def test_sixteen_patches(self):
        img = equalize_then_magnify(synth_natural(0, 128), PatchPlan(512, 64))
        rng = np.random.default_rng(0)
        patches = sample_patches(img, PatchPlan(512, 64, 16), rng)
        assert len(patches) == 16
        assert all(p.shape == (64, 64, 3) for p in patches)

    def test_offsets_in_bounds(self):
        rng = np.random.default_rng(1)
        offs = sample_patch_offsets((512, 512, 3), PatchPlan(512, 64, 1000), rng)
        assert offs.min() >= 0 and offs.max() <= 448

    def test_same_seed_same_offsets(self):
        plan = PatchPlan(512, 64, 16)
        a = sample_patch_offsets((512, 512, 3), plan, np.random.default_rng(7))
        b = sample_patch_offsets((512, 512, 3), plan, np.random.default_rng(7))
        assert (a == b).all()

    def test_offset_uniformity_chi2(self):
        # coarse 8x8 histogram over 1e5 draws; bins differ in width because
        # 449 valid offsets do not divide evenly
        rng = np.random.default_rng(2)
        plan = PatchPlan(512, 64, patches_per_image=100_000)
        offs = sample_patch_offsets((512, 512, 3), plan, rng)
        n_valid = 449
        edges = np.linspace(0, n_valid, 9)
        counts, _, _ = np.histogram2d(offs[:, 0], offs[:, 1], bins=[edges, edges])
        widths = np.diff(np.floor(edges))  # integer offsets per bin
        expected = np.outer(widths, widths) / n_valid ** 2 * len(offs)
        chi2 = ((counts - expected) ** 2 / expected).sum()
        p = stats.chi2.sf(chi2, df=63)
        assert p > 0.001

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            sample_patches(synth_natural(0, 32), PatchPlan(512, 64), np.random.default_rng(0))


class TestGrid:
    def test_tiling(self):
        img = equalize_then_magnify(synth_natural(0, 128), PatchPlan(512, 64))
        tiles = grid_patches(img, 4)
        assert len(tiles) == 16
        assert all(t.shape == (128, 128, 3) for t in tiles)

    def test_corner_offsets(self):
        offs = grid_offsets((512, 512, 3), 4)
        assert offs[0] == (0, 0)
        assert offs[15] == (384, 384)

    def test_reassemble_identity(self):
        img = synth_natural(1, 128)
        tiles = grid_patches(img, 4)
        assert (reassemble_grid(tiles, 4) == img).all()

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            grid_patches(synth_natural(0, 130), 4)

    def test_position_bounds(self):
        img = synth_natural(2, 128)
        assert grid_patch_at(img, 1).shape == (32, 32, 3)
        with pytest.raises(ValueError):
            grid_patch_at(img, 17)
        with pytest.raises(ValueError):
            grid_patch_at(img, 0)


def toy_manifest(class_sizes: dict) -> DatasetManifest:
    records = []
    for name, n in class_sizes.items():
        for i in range(n):
            records.append(ManifestRecord(f"{name}_{i}.png", name, name, f"{name}0",
                                          0, "zoo", "train"))
    return DatasetManifest(tuple(records))


class TestBalancedBatches:
    def test_batch_size_32_per_class(self):
        m = toy_manifest({c: 40 for c in "abcde"})
        batch = next(balanced_batches(m, 32, np.random.default_rng(0)))
        assert len(batch) == 160

    def test_uniform_histogram(self):
        m = toy_manifest({"a": 10, "b": 30, "c": 7})
        stream = balanced_batches(m, 4, np.random.default_rng(1))
        for _ in range(10):
            batch = next(stream)
            labels = [m.records[i].class_label for i in batch]
            assert labels.count("a") == labels.count("b") == labels.count("c") == 4

    def test_replay_with_same_seed(self):
        m = toy_manifest({"a": 9, "b": 5})
        s1 = balanced_batches(m, 3, np.random.default_rng(9))
        s2 = balanced_batches(m, 3, np.random.default_rng(9))
        for _ in range(12):
            assert next(s1) == next(s2)

    def test_missing_class_rejected(self):
        m = toy_manifest({"a": 4})
        labels = LabelSpace(("a", "b"))
        with pytest.raises(ManifestError):
            next(balanced_batches(m, 2, np.random.default_rng(0), labels))

    def test_batches_per_epoch(self):
        m = toy_manifest({"a": 10, "b": 30})
        assert batches_per_epoch(m, 4) == 3  # ceil(10 / 4)
