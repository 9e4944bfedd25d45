import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oen import container
from oen.data import (CLIP, GenParams, InfeasibleParamsError, NoCandidateError, SynthDataset, binary_profile,
                      generate, multiclass_profile, sample_patches, stack_patches)


class TestGenerate:
    def test_deterministic(self):
        a = generate(binary_profile(n_images=5, image_size=32, seed=1))
        b = generate(binary_profile(n_images=5, image_size=32, seed=1))
        assert a.images.tobytes() == b.images.tobytes() and a.masks.tobytes() == b.masks.tobytes()
        c = generate(binary_profile(n_images=5, image_size=32, seed=2))
        assert a.images.tobytes() != c.images.tobytes()

    def test_lesion_fraction_in_range(self):
        ds = generate(binary_profile(n_images=20, seed=0))
        frac = (ds.masks == 1).mean(axis=(1, 2))
        assert frac.min() >= 0.01 and frac.max() <= 0.05

    def test_multiclass_labels(self, small_multiclass):
        assert set(np.unique(small_multiclass.masks)) <= {0, 1, 2, 3}
        assert small_multiclass.images.shape[1] == 4
        frac = np.stack([(small_multiclass.masks == k).mean(axis=(1, 2)) for k in (1, 2, 3)])
        assert frac.min() >= 0.01 and frac.max() <= 0.04

    def test_shapes_and_range(self, small_binary):
        ds = small_binary
        assert ds.images.shape == (10, 2, 32, 32) and ds.masks.shape == (10, 32, 32)
        assert ds.images.dtype == np.float64 and ds.masks.dtype == np.int64
        assert np.all(np.isfinite(ds.images)) and np.abs(ds.images).max() <= CLIP

    def test_splits_disjoint(self, small_binary):
        s = small_binary.splits
        seen = s["train"] + s["val"] + s["test"]
        assert len(seen) == len(set(seen)) and set(seen) <= set(range(10))
        assert len(s["train"]) == 6 and len(s["val"]) == 1 and len(s["test"]) == 3

    def test_train_split_has_every_class(self, small_multiclass):
        assert set(np.unique(small_multiclass.masks[small_multiclass.split("train")])) == {0, 1, 2, 3}

    def test_lesion_is_brighter(self, small_binary):
        ds = small_binary
        assert ds.images[:, 0][ds.masks == 1].mean() > ds.images[:, 0][ds.masks == 0].mean() + 0.5

    def test_unknown_split(self, small_binary):
        with pytest.raises(KeyError):
            small_binary.split("holdout")

    @pytest.mark.parametrize("bad", [
        dict(num_classes=1, contrasts=((0.0,), (0.0,))),
        dict(class_fraction=(0.0, 0.1)),
        dict(class_fraction=(0.05, 0.01)),
        dict(image_size=8, blob_sigma=3.0),
        dict(image_size=8, class_fraction=(0.001, 0.002), blob_sigma=1.0),
        dict(contrasts=((0.0, 1.0),)),
        dict(split_fractions=(0.8, 0.2, 0.2)),
        dict(noise=-1.0),
    ])
    def test_infeasible(self, bad):
        with pytest.raises(InfeasibleParamsError):
            generate(binary_profile(**bad))

    def test_empty_train_split_fails_loudly(self):
        with pytest.raises(InfeasibleParamsError, match="training split"):
            generate(binary_profile(n_images=5, image_size=32, split_fractions=(0.0, 0.5, 0.5)))

    def test_save_load_round_trip(self, tmp_path, small_multiclass):
        p = tmp_path / "ds.bin"
        small_multiclass.save(p)
        back = SynthDataset.load(p)
        assert back.images.tobytes() == small_multiclass.images.tobytes()
        assert back.masks.tobytes() == small_multiclass.masks.tobytes()
        assert back.splits == small_multiclass.splits and back.params == small_multiclass.params
        back.save(tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == p.read_bytes()

    def test_load_wrong_kind(self, tmp_path):
        container.write(tmp_path / "x", {"kind": "segnet"}, {})
        with pytest.raises(container.CorruptFileError):
            SynthDataset.load(tmp_path / "x")


class TestSampler:
    def test_background_only(self, small_binary):
        for p in sample_patches(small_binary, "train", 8, 0.0, 200, seed=0):
            assert small_binary.masks[p.source][p.center] == 0 and not p.foreground

    def test_foreground_rate(self, small_binary):
        patches = sample_patches(small_binary, "train", 8, 0.9, 10_000, seed=1)
        rate = np.mean([small_binary.masks[p.source][p.center] != 0 for p in patches])
        assert abs(rate - 0.9) <= 0.02

    def test_full_size_patch_is_whole_image(self, small_binary):
        for p in sample_patches(small_binary, "train", 32, 0.5, 20, seed=2):
            np.testing.assert_array_equal(p.image, small_binary.images[p.source])
            np.testing.assert_array_equal(p.mask, small_binary.masks[p.source])

    def test_patch_contains_centre_and_matches_source(self, small_binary):
        for p in sample_patches(small_binary, "train", 9, 0.9, 300, seed=3):
            assert p.image.shape == (2, 9, 9) and p.mask.shape == (9, 9)
            assert p.source in small_binary.split("train")
            r, c = p.center
            top, left = min(max(r - 4, 0), 23), min(max(c - 4, 0), 23)
            np.testing.assert_array_equal(p.mask, small_binary.masks[p.source, top:top + 9, left:left + 9])
            assert p.mask[r - top, c - left] == small_binary.masks[p.source][p.center]

    def test_equal_class_probability(self, small_multiclass):
        patches = sample_patches(small_multiclass, "train", 8, 1.0, 6000, seed=4)
        labels = np.array([small_multiclass.masks[p.source][p.center] for p in patches])
        counts = np.bincount(labels, minlength=4)
        assert counts[0] == 0
        assert np.all(np.abs(counts[1:] / 6000 - 1 / 3) < 0.03)

    def test_deterministic(self, small_binary):
        a = stack_patches(sample_patches(small_binary, "train", 8, 0.9, 50, seed=5))
        b = stack_patches(sample_patches(small_binary, "train", 8, 0.9, 50, seed=5))
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        assert a[0].shape == (50, 2, 8, 8) and a[1].shape == (50, 8, 8)

    def test_no_foreground_candidate(self):
        ds = generate(binary_profile(n_images=5, image_size=32, seed=0))
        blank = SynthDataset(ds.images, np.zeros_like(ds.masks), ds.splits, ds.params)
        with pytest.raises(NoCandidateError):
            sample_patches(blank, "train", 8, 0.5, 10, seed=0)
        assert len(sample_patches(blank, "train", 8, 0.0, 10, seed=0)) == 10

    @pytest.mark.parametrize("kwargs", [dict(foreground_prob=1.5), dict(patch_size=0), dict(patch_size=33)])
    def test_bad_arguments(self, small_binary, kwargs):
        args = dict(foreground_prob=0.5, patch_size=8) | kwargs
        with pytest.raises(ValueError):
            sample_patches(small_binary, "train", args["patch_size"], args["foreground_prob"], 5, seed=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["binary", "multiclass"]))
def test_generated_data_invariants(seed, profile):
    params = (binary_profile if profile == "binary" else multiclass_profile)(n_images=4, image_size=24, seed=seed,
                                                                             split_fractions=(0.5, 0.0, 0.5))
    ds = generate(params)
    assert np.all(np.isfinite(ds.images)) and np.abs(ds.images).max() <= CLIP
    assert ds.masks.min() >= 0 and ds.masks.max() < params.num_classes
    n_pix = 24 * 24
    for k in range(1, params.num_classes):
        counts = (ds.masks == k).sum(axis=(1, 2))
        lo, hi = params.class_fraction
        assert np.all(counts >= np.ceil(lo * n_pix)) and np.all(counts <= np.floor(hi * n_pix))


def test_gen_params_are_hashable_values():
    a = GenParams(contrasts=[[0, 1], [0, 0.6]])
    assert a == GenParams() and hash(a) == hash(GenParams())
