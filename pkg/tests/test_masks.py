"""Rasterization, union masks, bilinear resizing, RLE and mask statistics."""
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xaibench.masks import (
    BACKGROUND,
    BitMask,
    DegenerateObject,
    EmptyCollection,
    MaskError,
    UnknownObjectId,
    bilinear_matrix,
    mask_stats,
    rasterize_scene,
    resize_image,
    resize_mask,
    rle_decode,
    rle_encode,
    union_mask,
)
from xaibench.scene import SceneGraph, make_object, random_scene
from xaibench.tensorio import TensorFormatError, load_tensor, save_tensor


def reference_resize(image, size):
    """Per-pixel bilinear sampling with half-pixel centres and edge clamping."""
    h, w = image.shape
    th, tw = size
    out = np.zeros(size)
    for i in range(th):
        sy = min(max((i + 0.5) * h / th - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(tw):
            sx = min(max((j + 0.5) * w / tw - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
                         + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))
    return out


def background_pixels(image):
    return np.all(image == np.asarray(BACKGROUND)[:, None, None], axis=0)


class TestRasterize:
    def test_two_objects(self, s2):
        store, image = rasterize_scene(s2)
        assert sorted(store) == [0, 1]
        assert not np.any(store[0].bits & store[1].bits)
        assert store[0].pixel_count > 0 and store[1].pixel_count > 0
        bg = ~(store[0].bits | store[1].bits)
        np.testing.assert_array_equal(image[:, bg], np.broadcast_to(np.array(BACKGROUND)[:, None], (3, bg.sum())))
        assert image.shape == (3, 40, 40)
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_painter_order(self):
        """The object nearer the bottom is in front and keeps its full shape."""
        back = make_object(0, "large", "red", "rubber", "cube", (20, 18))
        front = make_object(1, "large", "blue", "rubber", "cube", (26, 24))
        store, _ = rasterize_scene(SceneGraph((back, front), (48, 48)))
        alone, _ = rasterize_scene(SceneGraph((replace(front, id=0),), (48, 48)))
        assert store[1] == alone[0]
        full_back, _ = rasterize_scene(SceneGraph((back,), (48, 48)))
        assert store[0].bits.sum() < full_back[0].bits.sum()
        assert not np.any(store[0].bits & store[1].bits)

    def test_tie_later_id_wins(self):
        """Equal depth: the object with the larger id is painted last."""
        large = make_object(0, "large", "red", "rubber", "cube", (20, 20))
        small = make_object(1, "small", "blue", "rubber", "cube", (20, 20))
        store, _ = rasterize_scene(SceneGraph((large, small), (40, 40)))
        alone, _ = rasterize_scene(SceneGraph((replace(small, id=0),), (40, 40)))
        assert store[1] == alone[0]
        with pytest.raises(DegenerateObject):
            rasterize_scene(SceneGraph((replace(small, id=0), replace(large, id=1)),
                                       (40, 40)))

    def test_fully_covered(self):
        big = make_object(1, "large", "red", "rubber", "cube", (20, 20))
        small = make_object(0, "small", "blue", "rubber", "cube", (20, 19))
        with pytest.raises(DegenerateObject):
            rasterize_scene(SceneGraph((small, big), (40, 40)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_union_is_foreground(self, seed):
        scene = random_scene(np.random.default_rng(seed), (64, 64))
        try:
            store, image = rasterize_scene(scene)
        except DegenerateObject:
            return
        everything = union_mask(scene.ids, store)
        np.testing.assert_array_equal(everything.bits, ~background_pixels(image))
        assert everything.pixel_count == sum(m.pixel_count for m in store.values())


class TestUnionMask:
    def test_cases(self, s2):
        store, _ = rasterize_scene(s2)
        assert union_mask({0}, store) == store[0]
        both = union_mask({0, 1}, store)
        assert both.pixel_count == store[0].pixel_count + store[1].pixel_count
        empty = union_mask(set(), store)
        assert empty.pixel_count == 0 and empty.shape == (40, 40)

    def test_unknown_id(self, s2):
        store, _ = rasterize_scene(s2)
        with pytest.raises(UnknownObjectId):
            union_mask({0, 7}, store)


class TestResize:
    def test_identity(self):
        m = BitMask(np.random.default_rng(0).random((9, 7)) > 0.5)
        assert resize_mask(m, (9, 7)) == m

    def test_constant_masks(self):
        for size in [(1, 1), (5, 3), (32, 32), (100, 17)]:
            assert resize_mask(BitMask(np.ones((64, 64), bool)), size).pixel_count == size[0] * size[1]
            assert resize_mask(BitMask(np.zeros((64, 64), bool)), size).pixel_count == 0

    def test_single_pixel_upscale(self):
        bits = np.zeros((8, 8), bool)
        bits[3, 5] = True
        out = resize_mask(BitMask(bits), (16, 16))
        expected = reference_resize(bits.astype(float), (16, 16)) > 0
        np.testing.assert_array_equal(out.bits, expected)
        # interior pixel: outputs 2i-1 .. 2i+2 along each axis
        rows, cols = np.nonzero(out.bits)
        assert set(rows) == {5, 6, 7, 8} and set(cols) == {9, 10, 11, 12}

    @settings(max_examples=40, deadline=None)
    @given(img=arrays(float, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1)),
           th=st.integers(1, 12), tw=st.integers(1, 12))
    def test_matches_reference(self, img, th, tw):
        np.testing.assert_allclose(resize_image(img, (th, tw)), reference_resize(img, (th, tw)),
                                   rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        for n_in, n_out in [(64, 32), (32, 64), (7, 3), (1, 5), (5, 1)]:
            m = bilinear_matrix(n_in, n_out)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)
            assert m.min() >= 0.0

    def test_channels(self):
        img = np.random.default_rng(1).random((3, 10, 6))
        out = resize_image(img, (4, 9))
        for c in range(3):
            np.testing.assert_allclose(out[c], reference_resize(img[c], (4, 9)), atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(a=arrays(bool, (12, 10)), b=arrays(bool, (12, 10)), th=st.integers(1, 20), tw=st.integers(1, 20))
    def test_monotone(self, a, b, th, tw):
        small, big = BitMask(a & b), BitMask(a)
        assert resize_mask(small, (th, tw)).issubset(resize_mask(big, (th, tw)))

    def test_keeps_interior_objects(self):
        scene = random_scene(np.random.default_rng(5), (64, 64))
        store, _ = rasterize_scene(scene)
        for m in store.values():
            assert resize_mask(m, (32, 32)).pixel_count > 0

    def test_bad_target(self):
        with pytest.raises(ValueError):
            resize_mask(BitMask(np.ones((4, 4), bool)), (0, 4))


class TestRLE:
    @settings(max_examples=100)
    @given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
    def test_roundtrip(self, bits):
        runs = rle_encode(bits)
        assert sum(runs) == bits.size
        np.testing.assert_array_equal(rle_decode(runs, *bits.shape), bits)
        assert BitMask.from_record(BitMask(bits).to_record()) == BitMask(bits)

    def test_starts_with_false_run(self):
        assert rle_encode(np.array([[True, True, False]])) == [0, 2, 1]
        assert rle_encode(np.array([[False, True, True]])) == [1, 2]

    def test_bad_runs(self):
        with pytest.raises(MaskError):
            rle_decode([1, 2], 2, 2)

    def test_pixel_count(self):
        bits = np.random.default_rng(2).random((13, 11)) > 0.3
        assert BitMask(bits).pixel_count == int(bits.sum())


class TestMaskStats:
    def test_single(self):
        bits = np.zeros((10, 10), bool)
        bits.flat[:40] = True
        s = mask_stats([BitMask(bits)])["pixels"]
        assert s == {"min": 40.0, "max": 40.0, "mean": 40.0, "std": 0.0}

    def test_extremes(self):
        a = np.zeros((64, 64), bool)
        a.flat[:40] = True
        b = np.zeros((64, 64), bool)
        b.flat[:2040] = True
        s = mask_stats([BitMask(a), BitMask(b)], object_counts=[1, 1])
        assert (s["pixels"]["min"], s["pixels"]["max"]) == (40.0, 2040.0)
        assert s["pixels"]["mean"] == 1040.0
        assert s["objects"]["std"] == 0.0

    def test_empty(self):
        with pytest.raises(EmptyCollection):
            mask_stats([])


class TestTensorIO:
    def test_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).random((3, 5, 4)).astype(np.float32)
        save_tensor(tmp_path / "x.bin", x)
        raw = (tmp_path / "x.bin").read_bytes()
        assert raw[:4] == b"XTNS" and len(raw) == 16 + 4 * x.size
        np.testing.assert_array_equal(load_tensor(tmp_path / "x.bin"), x)

    def test_truncated(self, tmp_path):
        save_tensor(tmp_path / "x.bin", np.zeros((3, 2, 2)))
        p = tmp_path / "y.bin"
        p.write_bytes((tmp_path / "x.bin").read_bytes()[:-1])
        with pytest.raises(TensorFormatError):
            load_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "z.bin"
        p.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(TensorFormatError):
            load_tensor(p)
