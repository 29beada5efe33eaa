import json

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hflic.errors import DetectionsError
from hflic.masks import (
    Box,
    DetectionSet,
    load_all_detections,
    load_detections,
    rasterize,
    select_small_faces,
)


def write_detections(tmp_path, records):
    path = tmp_path / "detections.json"
    path.write_text(json.dumps(records))
    return path


class TestLoadDetections:
    def test_single_box(self, tmp_path):
        path = write_detections(tmp_path, [{"image": "a.png", "boxes": [[10, 10, 50, 50, 0.9]]}])
        dset = load_detections(path)
        assert dset.image_id == "a.png"
        assert len(dset.boxes) == 1
        assert dset.boxes[0].x1 == 50

    def test_degenerate_box_rejected(self, tmp_path):
        path = write_detections(tmp_path, [{"image": "a.png", "boxes": [[50, 10, 50, 50, 0.9]]}])
        with pytest.raises(DetectionsError):
            load_detections(path)

    def test_empty_boxes_ok(self, tmp_path):
        path = write_detections(tmp_path, [{"image": "a.png", "boxes": []}])
        assert load_detections(path).boxes == []

    def test_low_confidence_dropped(self, tmp_path):
        path = write_detections(
            tmp_path,
            [{"image": "a.png", "boxes": [[1, 1, 9, 9, 0.4], [1, 1, 9, 9, 0.6]]}],
        )
        assert len(load_detections(path).boxes) == 1

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('[{"image": "a.png",\n  "boxes": [[1, 1,]]}]')
        with pytest.raises(DetectionsError, match=r":\d+:\d+"):
            load_detections(path)

    def test_multi_record_lookup(self, tmp_path):
        path = write_detections(
            tmp_path,
            [
                {"image": "a.png", "boxes": []},
                {"image": "b.png", "boxes": [[0, 0, 4, 4, 1.0]]},
            ],
        )
        assert len(load_all_detections(path)) == 2
        assert len(load_detections(path, image="b.png").boxes) == 1
        with pytest.raises(DetectionsError):
            load_detections(path)  # ambiguous without a name

    def test_missing_file(self, tmp_path):
        with pytest.raises(DetectionsError):
            load_detections(tmp_path / "nope.json")


class TestSelectSmallFaces:
    def test_small_box_kept(self):
        dset = DetectionSet("x", [Box(100, 100, 140, 140, 0.9)])  # 0.61% of 512x512
        assert len(select_small_faces(dset, 512, 512).boxes) == 1

    def test_large_box_dropped(self):
        dset = DetectionSet("x", [Box(0, 0, 300, 300, 0.9)])  # 34% of 512x512
        assert select_small_faces(dset, 512, 512).boxes == []

    def test_tiny_box_dropped(self):
        dset = DetectionSet("x", [Box(0, 0, 3, 3, 0.9)])  # below 16 px^2
        assert select_small_faces(dset, 512, 512).boxes == []

    def test_monotone_in_threshold(self, rng):
        boxes = []
        for _ in range(40):
            x0, y0 = rng.uniform(0, 400, 2)
            w, h = rng.uniform(5, 100, 2)
            boxes.append(Box(float(x0), float(y0), float(x0 + w), float(y0 + h), 1.0))
        dset = DetectionSet("x", boxes)
        counts = [
            len(select_small_faces(dset, 512, 512, area_frac_max=f).boxes)
            for f in (0.05, 0.025, 0.01, 0.005, 0.001)
        ]
        assert all(b <= a for a, b in zip(counts, counts[1:]))


class TestRasterize:
    def test_no_boxes_all_perceptual(self):
        masks = rasterize(DetectionSet("x", []), 128, 128)
        assert float(masks.face.sum()) == 0.0
        assert float(masks.perc.sum()) == 128 * 128

    def test_full_image_box(self):
        masks = rasterize(DetectionSet("x", [Box(0, 0, 128, 128, 1.0)]), 128, 128)
        assert float(masks.face.min()) == 1.0
        assert float(masks.perc.max()) == 0.0

    def test_pyramid_mass_for_interior_box(self):
        # 32x32 box dilated by 4 -> 40x40 mass; level 2 pools by 16.
        masks = rasterize(DetectionSet("x", [Box(32, 32, 64, 64, 1.0)]), 128, 128)
        assert float(masks.face.sum()) == 40 * 40
        assert float(masks.pyramid[2].sum()) == pytest.approx((32 + 2 * 4) ** 2 / 16)

    def test_pyramid_mass_conservation(self):
        masks = rasterize(DetectionSet("x", [Box(40, 24, 72, 56, 1.0)]), 128, 128)
        base_mean = float(masks.face.mean())
        for level, pooled in masks.pyramid.items():
            assert float(pooled.mean()) == pytest.approx(base_mean, abs=1e-6)

    def test_idempotent(self):
        dset = DetectionSet("x", [Box(8, 8, 24, 24, 1.0)])
        a = rasterize(dset, 64, 64, levels=(0, 1, 2))
        b = rasterize(dset, 64, 64, levels=(0, 1, 2))
        assert torch.equal(a.face, b.face)
        assert all(torch.equal(a.pyramid[k], b.pyramid[k]) for k in a.pyramid)

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.integers(0, 100), st.integers(0, 100), st.integers(1, 27), st.integers(1, 27)
            ),
            max_size=5,
        )
    )
    def test_partition_property(self, raw_boxes):
        boxes = [Box(x, y, x + w, y + h, 1.0) for x, y, w, h in raw_boxes]
        masks = rasterize(DetectionSet("x", boxes), 128, 128)
        assert torch.equal(masks.face + masks.perc, torch.ones(128, 128))
        assert float((masks.face * masks.perc).sum()) == 0.0
