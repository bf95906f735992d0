from collections import Counter
from dataclasses import asdict

import numpy as np
import pytest
import torch

from archtrace.core import load_manifest
from archtrace.zoo import (GeneratorSpec, build_generator, builtin_specs,
                           make_zoo_dataset, mirror_band_energy_ratio,
                           sample_images)

# mirror-band energy thresholds frozen after a 1000-sample oracle run:
# SNGAN (nearest) 0.0882, InfoMaxGAN (bilinear) 0.0086
NEAREST_BAND_MIN = 0.04
BILINEAR_BAND_MAX = 0.02


@pytest.fixture(scope="module")
def specs64():
    return {s.name: s for s in builtin_specs(64)}


class TestBuiltinSpecs:
    def test_progan_components(self, specs64):
        s = specs64["ProGAN"]
        assert s.block_type == "DCGAN" and s.skip_connect == "none"
        assert s.upsample == "nearest" and s.norm == "pixel_norm"

    def test_mmdgan_upsample(self, specs64):
        assert specs64["MMDGAN"].upsample == "depth_to_space"
        assert specs64["MMDGAN"].norm == "batch_norm"

    def test_sngan_infomax_differ_only_in_upsample(self, specs64):
        a = asdict(specs64["SNGAN"])
        b = asdict(specs64["InfoMaxGAN"])
        diff = {k for k in a if a[k] != b[k]}
        assert diff == {"name", "upsample"}
        assert a["upsample"] == "nearest" and b["upsample"] == "bilinear"

    def test_all_four_present(self, specs64):
        assert set(specs64) == {"ProGAN", "MMDGAN", "SNGAN", "InfoMaxGAN"}

    def test_128_variant(self):
        for s in builtin_specs(128):
            assert s.output_resolution == 128

    def test_latent_dims(self, specs64):
        assert specs64["ProGAN"].latent_dim == 512
        assert specs64["MMDGAN"].latent_dim == 100
        assert specs64["SNGAN"].latent_dim == 128

    def test_depth_to_space_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divisible by 4"):
            GeneratorSpec("bad", "ResNet", "upsample_conv", "depth_to_space",
                          "batch_norm", 64, 1024, (512, 256, 126, 64, 32), 128,
                          "tanh", "bn_relu_conv")

    def test_resolution_consistency_enforced(self):
        with pytest.raises(ValueError, match="output_resolution"):
            GeneratorSpec("bad", "ResNet", "upsample_conv", "nearest", "batch_norm",
                          64, 1024, (512, 256), 128, "tanh", "bn_relu_conv")


class TestBuildAndSample:
    def test_same_seed_same_weights(self, specs64):
        a = build_generator(specs64["SNGAN"], 5)
        b = build_generator(specs64["SNGAN"], 5)
        for pa, pb in zip(a.module.parameters(), b.module.parameters()):
            assert (pa == pb).all()

    def test_different_seed_different_weights(self, specs64):
        a = build_generator(specs64["SNGAN"], 5)
        b = build_generator(specs64["SNGAN"], 6)
        assert any(not (pa == pb).all()
                   for pa, pb in zip(a.module.parameters(), b.module.parameters()))

    def test_output_shape_and_determinism(self, specs64):
        inst = build_generator(specs64["InfoMaxGAN"], 0)
        imgs = sample_images(inst, 4, latent_seed=3)
        assert len(imgs) == 4
        assert all(im.shape == (64, 64, 3) for im in imgs)
        again = sample_images(inst, 4, latent_seed=3)
        assert all((a == b).all() for a, b in zip(imgs, again))

    def test_sigmoid_range(self, specs64):
        imgs = sample_images(build_generator(specs64["MMDGAN"], 0), 4, 1)
        lo = min(im.min() for im in imgs)
        hi = max(im.max() for im in imgs)
        assert 0.0 < lo and hi < 1.0

    def test_tanh_mapped_to_unit_interval(self, specs64):
        imgs = sample_images(build_generator(specs64["SNGAN"], 0), 4, 1)
        assert all(im.min() >= 0.0 and im.max() <= 1.0 for im in imgs)

    def test_batch_mean_strictly_interior(self, specs64):
        for name in ("ProGAN", "MMDGAN", "SNGAN", "InfoMaxGAN"):
            imgs = sample_images(build_generator(specs64[name], 1), 4, 2)
            mean = float(np.mean([im.mean() for im in imgs]))
            assert np.isfinite(mean) and 0.0 < mean < 1.0

    def test_128_output(self):
        spec = next(s for s in builtin_specs(128) if s.name == "MMDGAN")
        imgs = sample_images(build_generator(spec, 0), 2, 0)
        assert imgs[0].shape == (128, 128, 3)

    def test_n_must_be_positive(self, specs64):
        inst = build_generator(specs64["MMDGAN"], 0)
        with pytest.raises(ValueError):
            sample_images(inst, 0, 0)


class TestSpectralSanity:
    def test_nearest_vs_bilinear_mirror_bands(self, specs64):
        nearest = sample_images(build_generator(specs64["SNGAN"], 0), 48, 10)
        bilinear = sample_images(build_generator(specs64["InfoMaxGAN"], 0), 48, 10)
        r_near = mirror_band_energy_ratio(nearest)
        r_bi = mirror_band_energy_ratio(bilinear)
        assert r_near > NEAREST_BAND_MIN
        assert r_bi < BILINEAR_BAND_MAX


class TestZooDataset:
    def test_counts_and_balance(self, tiny_zoo):
        d, manifest = tiny_zoo
        assert len(manifest) == 2 * 2 * 12
        counts = Counter(r.class_label for r in manifest)
        assert set(counts.values()) == {24}

    def test_split_rule(self, tiny_zoo):
        _, manifest = tiny_zoo
        for r in manifest:
            if r.seed == 0:
                assert r.split in ("train", "val")
            else:
                assert r.split == "test"

    def test_model_id_encodes_arch_and_seed(self, tiny_zoo):
        _, manifest = tiny_zoo
        r = manifest.records[0]
        assert r.model_id == f"{r.architecture_id}_s{r.seed}"

    def test_manifest_file_and_description(self, tiny_zoo):
        d, manifest = tiny_zoo
        reloaded = load_manifest(d / "manifest.csv")
        assert reloaded == manifest
        assert (d / "zoo.txt").exists()

    def test_images_loadable(self, tiny_zoo):
        from archtrace.core import load_image
        d, manifest = tiny_zoo
        img = load_image(d / manifest.records[0].image_path)
        assert img.shape == (64, 64, 3)

    def test_empty_specs_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            make_zoo_dataset([], 1, 1, tmp_path)
