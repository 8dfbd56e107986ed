import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camoseg.config import SynthConfig
from camoseg.data.augment import augment
from camoseg.data.coco import AnnotatedSample, Instance, filter_rare_classes, load_coco, rasterize_polygons
from camoseg.data.rle import mask_to_counts, rle_area, rle_decode, rle_encode, string_to_counts
from camoseg.data.sampling import category_repeat_factors, derive_seed, epoch_indices, repeat_factors
from camoseg.data.synth import render_sample, synth_generate
from camoseg.errors import ParseError, SchemaError
from camoseg.vocab import Vocabulary

pycocotools_mask = pytest.importorskip("pycocotools.mask")


# ----------------------------------------------------------------- RLE

class TestRLE:
    def test_all_zero(self):
        m = np.zeros((3, 3), bool)
        assert mask_to_counts(m) == [9]
        assert rle_encode(m)["counts"] == "9"

    def test_all_one(self):
        assert mask_to_counts(np.ones((3, 3), bool)) == [0, 9]

    def test_column_major(self):
        m = np.array([[1, 0], [1, 0]], bool)
        assert mask_to_counts(m) == [0, 2, 2]

    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 40), st.floats(0.0, 1.0))
    def test_matches_pycocotools(self, seed, h, w, density):
        m = np.random.default_rng(seed).random((h, w)) < density
        ours = rle_encode(m)
        ref = pycocotools_mask.encode(np.asfortranarray(m.astype(np.uint8)))
        assert ours["counts"].encode() == ref["counts"]
        assert ours["size"] == list(ref["size"])
        assert np.array_equal(rle_decode(ours), m)
        assert rle_area(ours) == m.sum()

    def test_decode_list_counts(self):
        assert rle_decode({"size": [2, 2], "counts": [1, 2, 1]}).tolist() == [[False, True], [True, False]]

    def test_parse_error_reports_offset(self):
        with pytest.raises(ParseError) as exc:
            string_to_counts("0" + "\x7f")
        assert exc.value.offset == 1

    def test_total_mismatch(self):
        with pytest.raises(Exception):
            rle_decode({"size": [3, 3], "counts": [2, 2]})


# ----------------------------------------------------------------- COCO

def _write(tmp_path, payload):
    p = tmp_path / "ann.json"
    p.write_text(json.dumps(payload))
    return p


def _minimal(seg):
    return {
        "images": [{"id": 1, "file_name": "a.png", "height": 5, "width": 5}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 7, "segmentation": seg, "iscrowd": 0}],
        "categories": [{"id": 7, "name": "moth"}],
    }


class TestCOCO:
    def test_minimal_rle(self, tmp_path):
        m = np.zeros((5, 5), bool)
        m[1:3, 2:4] = True
        index = load_coco(_write(tmp_path, _minimal(rle_encode(m))), Vocabulary.from_names(["moth"]))
        assert len(index) == 1 and index.num_instances == 1
        assert np.array_equal(rle_decode(index.samples[0].instances[0].rle), m)
        assert index.category_freq == {0: 1}

    def test_polygon_square(self, tmp_path):
        poly = [[1.0, 1.0, 4.0, 1.0, 4.0, 4.0, 1.0, 4.0]]
        index = load_coco(_write(tmp_path, _minimal(poly)), Vocabulary.from_names(["moth"]))
        m = rle_decode(index.samples[0].instances[0].rle)
        assert m.sum() == 9 and m[1:4, 1:4].all()

    def test_rasterize_matches_point_in_polygon(self, rng):
        pts = rng.uniform(0, 12, size=(7, 2))
        got = rasterize_polygons([pts.ravel().tolist()], 12, 12)
        want = np.zeros((12, 12), bool)
        for y in range(12):
            for x in range(12):
                px, py, inside = x + 0.5, y + 0.5, False
                for k in range(7):
                    (x1, y1), (x2, y2) = pts[k], pts[(k + 1) % 7]
                    if (y1 > py) != (y2 > py) and px < x1 + (py - y1) * (x2 - x1) / (y2 - y1):
                        inside = not inside
                want[y, x] = inside
        assert np.array_equal(got, want)

    def test_unknown_image_id(self, tmp_path):
        payload = _minimal(rle_encode(np.ones((5, 5), bool)))
        payload["annotations"][0]["image_id"] = 99
        with pytest.raises(SchemaError):
            load_coco(_write(tmp_path, payload), Vocabulary.from_names(["moth"]))

    def test_missing_key_names_path(self, tmp_path):
        payload = _minimal(rle_encode(np.ones((5, 5), bool)))
        del payload["images"][0]["height"]
        with pytest.raises(SchemaError, match=r"images\[0\]"):
            load_coco(_write(tmp_path, payload), Vocabulary.from_names(["moth"]))

    def test_unknown_category_rejected(self, tmp_path):
        payload = _minimal(rle_encode(np.ones((5, 5), bool)))
        payload["categories"][0]["name"] = "whale"
        index = load_coco(_write(tmp_path, payload), Vocabulary.from_names(["moth"]))
        assert index.rejected == 1 and index.num_instances == 0


def _index_with_counts(tmp_path, counts):
    names = [f"c{k}" for k in range(len(counts))]
    images, anns = [], []
    m = rle_encode(np.ones((2, 2), bool))
    for cat, n in enumerate(counts):
        for _ in range(n):
            iid = len(images)
            images.append({"id": iid, "file_name": f"{iid}.png", "height": 2, "width": 2})
            anns.append({"id": len(anns), "image_id": iid, "category_id": cat, "segmentation": m})
    payload = {"images": images, "annotations": anns, "categories": [{"id": k, "name": n} for k, n in enumerate(names)]}
    return load_coco(_write(tmp_path, payload), Vocabulary.from_names(names))


class TestRareClasses:
    def test_threshold(self, tmp_path):
        out = filter_rare_classes(_index_with_counts(tmp_path, [4, 5, 6]), 5)
        assert out.vocab.names == ["c1", "c2"]
        assert out.instance_counts() == Counter({0: 5, 1: 6})

    def test_idempotent(self, tmp_path):
        once = filter_rare_classes(_index_with_counts(tmp_path, [1, 5, 2, 7]), 5)
        twice = filter_rare_classes(once, 5)
        assert once.samples == twice.samples and once.vocab == twice.vocab

    def test_all_rare(self, tmp_path):
        out = filter_rare_classes(_index_with_counts(tmp_path, [1, 2]), 5)
        assert out.num_instances == 0 and len(out.vocab) == 0


# ------------------------------------------------------------- sampling

class TestRepeatFactors:
    def test_boundary_and_sqrt(self):
        r = category_repeat_factors({0: 10, 1: 1}, 1000, 0.01)
        assert r[0] == 1.0
        r = category_repeat_factors({0: 1}, 400, 0.01)
        assert r[0] == pytest.approx(2.0)

    def test_monte_carlo(self, tmp_path):
        index = _index_with_counts(tmp_path, [1, 3, 20])
        factors = repeat_factors(index, 0.5)
        rng = np.random.default_rng(0)
        totals = np.zeros(len(factors))
        for _ in range(10_000):
            totals += np.bincount(epoch_indices(factors, rng), minlength=len(factors))
        assert np.allclose(totals / 10_000, factors, rtol=0.02)

    def test_derive_seed_stable(self):
        assert derive_seed(0, 5, 1) == derive_seed(0, 5, 1) != derive_seed(0, 1, 5)


# -------------------------------------------------------------- augment

def _disk_sample(size=64, radius=12):
    yy, xx = np.mgrid[:size, :size]
    m = (yy - size / 2) ** 2 + (xx - size / 2) ** 2 < radius**2
    img = np.random.default_rng(0).random((size, size, 3)).astype(np.float32)
    return AnnotatedSample(img, [Instance(m, 2)], 3)


class TestAugment:
    def test_identity(self):
        s = _disk_sample(64)
        out = augment(s, 0, 64, scale=1.0)
        assert np.array_equal(out.image, s.image) and np.array_equal(out.instances[0].mask, s.instances[0].mask)

    def test_enlarge_shape(self):
        out = augment(_disk_sample(64), 3, 64, scale=2.0)
        assert out.image.shape == (64, 64, 3) and out.instances[0].mask.shape == (64, 64)

    @given(st.floats(0.5, 2.0))
    def test_area_scaling(self, s):
        sample = _disk_sample(64, 10)
        out = augment(sample, 0, 160, scale=s)
        assert out.instances[0].mask.sum() == pytest.approx(s * s * sample.instances[0].mask.sum(), rel=0.1)

    @given(st.integers(0, 1000))
    def test_preserves_instances_and_determinism(self, seed):
        s = _disk_sample()
        a, b = augment(s, seed, 48), augment(s, seed, 48)
        assert [i.category_id for i in a.instances] == [2]
        assert np.array_equal(a.image, b.image)
        assert a.image.shape == (48, 48, 3) and 0 <= a.image.min() and a.image.max() <= 1


# ---------------------------------------------------------------- synth

class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        cfg = SynthConfig(num_train=2, num_val=1, image_size=64)
        synth_generate(cfg, 0, tmp_path / "a")
        synth_generate(cfg, 0, tmp_path / "b")
        for rel in ["vocab.json", "train/annotations.json", "train/images/000001.png", "val/images/000000.png"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_zero_contrast_is_invisible(self):
        image, background, placed = render_sample(np.random.default_rng(0), 3, 2, 64, 0.0)
        assert np.abs(image - background).mean() < 1e-6
        assert placed and all(m.any() for m, _ in placed)

    def test_bookkeeping(self, tmp_path):
        cfg = SynthConfig(num_train=8, num_val=0, num_categories=3, instances_per_image=(1, 3), image_size=64)
        coco = synth_generate(cfg, 0, tmp_path)["train"]
        per_image = Counter(a["image_id"] for a in coco["annotations"])
        assert len(coco["images"]) == 8 and len(coco["categories"]) == 3
        assert all(1 <= per_image[i] <= 3 for i in range(8))
        index = load_coco(tmp_path / "train" / "annotations.json", Vocabulary.load(tmp_path / "vocab.json"))
        sample = index.load(0)
        assert sample.image.shape == (64, 64, 3)
        assert all(i.mask.shape == (64, 64) and i.mask.any() for i in sample.instances)
