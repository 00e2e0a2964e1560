"""Synthetic image generation, patch tiling, augmentation, file formats."""

import dataclasses

import numpy as np
import pytest

from csdetect.core import AnnotationSet, ImageGrid, round_half_up, to_dense_map
from csdetect.synthdata import (
    SynthesisParams,
    extract_patches,
    generate_image,
    load_pgm,
    read_manifest,
    rotate_augment,
    save_pgm,
    write_manifest,
)

BASE = SynthesisParams(grid=ImageGrid(64, 64), blob_radius_range=(3.0, 5.0), min_separation=12.0)


def test_params_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(BASE, cell_count_range=(5, 2))
    with pytest.raises(ValueError):
        dataclasses.replace(BASE, blob_radius_range=(0.0, 2.0))
    with pytest.raises(ValueError):
        dataclasses.replace(BASE, intensity_range=(0.5, 1.5))
    with pytest.raises(ValueError):
        dataclasses.replace(BASE, background_noise_sigma=-0.1)


def test_zero_cells_gives_noise_only_image():
    params = dataclasses.replace(BASE, cell_count_range=(0, 0), seed=1)
    image, ann = generate_image(params)
    assert len(ann) == 0
    assert image.shape == (64, 64)
    assert image.max() <= 1.0 and image.min() >= 0.0
    assert image.max() < 0.2  # nothing rendered, just clipped noise


def test_generation_is_deterministic():
    params = dataclasses.replace(BASE, seed=77)
    image_a, ann_a = generate_image(params)
    image_b, ann_b = generate_image(params)
    assert np.array_equal(image_a, image_b)
    assert ann_a == ann_b


def test_separation_constraint_is_respected():
    grid = ImageGrid(260, 260)
    params = SynthesisParams(
        grid=grid, cell_count_range=(5, 5), min_separation=40.0, seed=3
    )
    _, ann = generate_image(params)
    pts = ann.coords()
    assert len(ann) == 5
    for i in range(5):
        for j in range(i + 1, 5):
            assert np.hypot(*(pts[i] - pts[j])) >= 40.0


def test_blobs_peak_near_their_centroids():
    params = dataclasses.replace(
        BASE, cell_count_range=(3, 3), background_noise_sigma=0.0,
        intensity_range=(0.9, 1.0), seed=5,
    )
    image, ann = generate_image(params)
    for x, y in ann.cells:
        assert image[round_half_up(y) - 1, round_half_up(x) - 1] > 0.5


def test_infeasible_separation_raises():
    params = dataclasses.replace(
        BASE, cell_count_range=(30, 30), min_separation=60.0, seed=0
    )
    with pytest.raises(ValueError, match="could not place"):
        generate_image(params)


def test_patch_tiling_covers_and_localizes():
    grid = ImageGrid(40, 40)
    cells = ((5.0, 5.0), (21.0, 7.0), (37.5, 38.2))
    ann = AnnotationSet(grid=grid, cells=cells)
    image = np.arange(1600, dtype=float).reshape(40, 40) / 1600.0
    patches = extract_patches(image, ann, patch_size=16, offset=(0, 0))
    assert len(patches) == 4  # 2x2 full tiles, the 8 px border strip dropped
    assert sum(len(p.cells) for p in patches) == 2  # (37.5, 38.2) is in the strip
    for p in patches:
        x0, y0 = p.origin
        assert np.array_equal(p.pixels, image[y0 : y0 + 16, x0 : x0 + 16])
        for lx, ly in p.cells.cells:
            assert 1.0 <= lx <= 16.0 and 1.0 <= ly <= 16.0
            gx, gy = lx + x0, ly + y0
            assert any(abs(gx - cx) < 1.0 and abs(gy - cy) < 1.0 for cx, cy in cells)


def test_patch_boundary_cell_lands_in_exactly_one_tile():
    grid = ImageGrid(32, 32)
    # rounds to pixel 16 -> left tile; 16.6 would round to 17 -> right tile
    ann = AnnotationSet(grid=grid, cells=((16.4, 8.0), (16.6, 24.0)))
    patches = extract_patches(np.zeros((32, 32)), ann, patch_size=16)
    owners = [(p.origin, p.cells.cells) for p in patches if len(p.cells)]
    assert sum(len(c) for _, c in owners) == 2
    assert {o[0] for o, _ in owners} == {0, 16}


def test_patch_offset_validation():
    image = np.zeros((32, 32))
    ann = AnnotationSet(grid=ImageGrid(32, 32))
    with pytest.raises(ValueError):
        extract_patches(image, ann, patch_size=16, offset=(16, 0))
    with pytest.raises(ValueError):
        extract_patches(image, ann, patch_size=64)


def test_rotation_identity_and_corners():
    grid = ImageGrid(8, 8)
    ann = AnnotationSet(grid=grid, cells=((1.0, 1.0), (3.0, 2.0)))
    patch = np.random.default_rng(0).uniform(size=(8, 8))
    views = rotate_augment(patch, ann)
    assert len(views) == 4
    assert views[0][0] is patch and views[0][1] is ann
    # 180 degrees sends the (1, 1) corner to (s, s)
    assert (8.0, 8.0) in views[2][1].cells


def test_rotation_moves_cells_with_the_pixels():
    grid = ImageGrid(9, 9)
    ann = AnnotationSet(grid=grid, cells=((2.0, 5.0), (7.0, 3.0)))
    delta = to_dense_map(ann).astype(float)
    for pixels, cells in rotate_augment(delta, ann):
        assert np.array_equal(pixels, to_dense_map(cells))


def test_four_rotations_compose_to_identity():
    grid = ImageGrid(8, 8)
    ann = AnnotationSet(grid=grid, cells=((2.5, 6.25),))
    patch = np.random.default_rng(1).uniform(size=(8, 8))
    pixels, cells = patch, ann
    for _ in range(4):
        _, (pixels, cells) = 0, rotate_augment(pixels, cells)[1]
    assert np.array_equal(pixels, patch)
    assert cells == ann


def test_rotation_rejects_non_square():
    with pytest.raises(ValueError):
        rotate_augment(np.zeros((4, 5)), AnnotationSet(grid=ImageGrid(5, 4)))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(12, 17))
    path = tmp_path / "img.pgm"
    save_pgm(image, path)
    loaded = load_pgm(path)
    assert loaded.shape == (12, 17)
    assert np.array_equal(np.rint(image * 255), np.rint(loaded * 255))


def test_pgm_parser_handles_comments_and_rejects_garbage(tmp_path):
    path = tmp_path / "img.pgm"
    body = bytes(range(6))
    path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + body)
    assert load_pgm(path).shape == (2, 3)
    path.write_bytes(b"P6\n3 2\n255\n" + body)
    with pytest.raises(ValueError, match="PGM"):
        load_pgm(path)
    path.write_bytes(b"P5\n3 2\n255\n" + body[:-2])
    with pytest.raises(ValueError, match="truncated"):
        load_pgm(path)


def test_manifest_round_trip(tmp_path):
    manifest = {
        "grid": {"width": 64, "height": 64},
        "seed": 7,
        "images": [{"id": "train_000", "image": "images/train_000.pgm",
                    "annotations": "annotations/train_000.csv", "split": "train"}],
        "splits": {"train": ["train_000"], "test": []},
    }
    path = tmp_path / "manifest.yaml"
    write_manifest(manifest, path)
    assert read_manifest(path) == manifest
    write_manifest({"grid": {}}, path)
    with pytest.raises(ValueError, match="images"):
        read_manifest(path)
