import json

import numpy as np
import pytest

from melanoscope.classifier import ANCHOR_COLORS
from melanoscope.labels import Label
from melanoscope.slide_io import load_annotations, open_slide, read_region
from melanoscope.synthgen import (
    Blob,
    SynthError,
    SynthSpec,
    anchor_passes_foreground,
    generate_slide,
    random_spec,
)
from melanoscope.tiling import foreground_mask


def spec_with(blobs, slide_id="t", size=512, levels=2, seed=1, jitter=6):
    return SynthSpec(
        slide_id=slide_id,
        width=size,
        height=size,
        level_count=levels,
        blobs=tuple(blobs),
        seed=seed,
        jitter=jitter,
    )


def test_malignant_only_truth_is_melanoma(tmp_path):
    spec = spec_with([Blob(Label.MALIGNANT, 256, 256, 100)])
    generated = generate_slide(spec, tmp_path)
    assert generated.truth["verdict"] == "melanoma"
    assert generated.truth["areas"]["benign"] == 0


def test_benign_only_truth_is_benign(tmp_path):
    spec = spec_with([Blob(Label.BENIGN, 200, 300, 80), Blob(Label.NORMAL, 400, 150, 60)])
    generated = generate_slide(spec, tmp_path)
    assert generated.truth["verdict"] == "benign_nevus"


def test_no_blobs_truth_is_benign(tmp_path):
    generated = generate_slide(spec_with([]), tmp_path)
    assert generated.truth["verdict"] == "benign_nevus"
    assert sum(generated.truth["areas"].values()) == 0


def test_truth_ratio_rule(tmp_path):
    # Tiny malignant blob next to a large benign one: ratio below 4 percent.
    spec = spec_with(
        [Blob(Label.BENIGN, 200, 200, 150), Blob(Label.MALIGNANT, 420, 420, 25)],
        slide_id="ratio",
    )
    generated = generate_slide(spec, tmp_path)
    areas = generated.truth["areas"]
    ratio = areas["malignant"] / (areas["malignant"] + areas["benign"])
    assert ratio < 0.04
    assert generated.truth["verdict"] == "benign_nevus"


def test_deterministic_bytes(tmp_path):
    spec = spec_with([Blob(Label.MALIGNANT, 256, 200, 90)], seed=77)
    a = generate_slide(spec, tmp_path / "a")
    b = generate_slide(spec, tmp_path / "b")
    for name in ("meta.json", "level_0.png", "level_1.png"):
        assert (a.pyramid_dir / name).read_bytes() == (b.pyramid_dir / name).read_bytes()
    assert a.annotation_path.read_bytes() == b.annotation_path.read_bytes()
    assert a.truth_path.read_bytes() == b.truth_path.read_bytes()


def test_seed_changes_pixels(tmp_path):
    a = generate_slide(spec_with([Blob(Label.BENIGN, 256, 256, 90)], seed=1), tmp_path / "a")
    b = generate_slide(spec_with([Blob(Label.BENIGN, 256, 256, 90)], seed=2), tmp_path / "b")
    assert (a.pyramid_dir / "level_0.png").read_bytes() != (
        b.pyramid_dir / "level_0.png"
    ).read_bytes()


def test_blob_out_of_bounds(tmp_path):
    with pytest.raises(SynthError, match="bounds"):
        spec_with([Blob(Label.BENIGN, 10, 10, 50)])


def test_jitter_capped():
    with pytest.raises(SynthError, match="jitter"):
        spec_with([], jitter=25)


def test_dimensions_must_match_levels():
    with pytest.raises(SynthError, match="divisible"):
        SynthSpec(slide_id="x", width=510, height=512, level_count=3)


def test_anchor_colors_are_foreground():
    for label in Label:
        assert anchor_passes_foreground(ANCHOR_COLORS[label])
    assert not anchor_passes_foreground((255, 255, 255))
    assert not anchor_passes_foreground((0, 255, 0))


def test_generated_blob_pixels_pass_foreground(tmp_path):
    spec = spec_with([Blob(Label.MALIGNANT, 256, 256, 120)], jitter=10, seed=5)
    generated = generate_slide(spec, tmp_path)
    slide = open_slide(generated.pyramid_dir)
    tile = read_region(slide, 0, 0, 0, 512, 512)
    mask = foreground_mask(tile)
    ys, xs = np.mgrid[0:512, 0:512]
    inside = (xs + 0.5 - 256) ** 2 + (ys + 0.5 - 256) ** 2 <= 120**2
    assert mask.bits[inside].all()
    assert not mask.bits[~inside].any()  # background stays background


def test_jitter_keeps_pixels_nearest_own_anchor(tmp_path):
    spec = spec_with(
        [Blob(Label.BENIGN, 150, 150, 80), Blob(Label.MALIGNANT, 360, 360, 90)],
        jitter=10,
        seed=9,
    )
    generated = generate_slide(spec, tmp_path)
    slide = open_slide(generated.pyramid_dir)
    pixels = read_region(slide, 0, 0, 0, 512, 512).pixels.astype(np.float64)
    anchors = {label: np.asarray(ANCHOR_COLORS[label], dtype=np.float64) for label in Label}
    for blob in spec.blobs:
        ys, xs = np.mgrid[0:512, 0:512]
        inside = (xs + 0.5 - blob.center_x) ** 2 + (ys + 0.5 - blob.center_y) ** 2 <= blob.radius**2
        own = np.linalg.norm(pixels[inside] - anchors[blob.label], axis=1)
        for other, anchor in anchors.items():
            if other is blob.label:
                continue
            assert (own < np.linalg.norm(pixels[inside] - anchor, axis=1)).all()


def test_annotation_polygons_match_blobs(tmp_path):
    spec = spec_with([Blob(Label.BENIGN, 200, 260, 70), Blob(Label.NORMAL, 380, 140, 50)])
    generated = generate_slide(spec, tmp_path)
    ann = load_annotations(generated.annotation_path)
    assert [r.label for r in ann.regions] == [Label.BENIGN, Label.NORMAL]
    for region, blob in zip(ann.regions, spec.blobs):
        assert len(region.polygon) == 64
        radii = [
            np.hypot(px - blob.center_x, py - blob.center_y) for px, py in region.polygon
        ]
        assert max(abs(r - blob.radius) for r in radii) < 1e-6


def test_painted_area_close_to_disc_area(tmp_path):
    spec = spec_with([Blob(Label.MALIGNANT, 256, 256, 100)])
    generated = generate_slide(spec, tmp_path)
    area = generated.truth["areas"]["malignant"]
    assert abs(area - np.pi * 100**2) < 400  # boundary pixels only


def test_random_spec_within_bounds(rng):
    for i in range(10):
        spec = random_spec(f"r{i}", rng, width=1024, height=768, level_count=2)
        assert spec.width == 1024
        for blob in spec.blobs:
            assert blob.center_x - blob.radius >= 0
            assert blob.center_y + blob.radius <= 768


def test_truth_json_matches_returned_dict(tmp_path):
    generated = generate_slide(spec_with([Blob(Label.MALIGNANT, 256, 256, 64)]), tmp_path)
    assert json.loads(generated.truth_path.read_text()) == generated.truth
