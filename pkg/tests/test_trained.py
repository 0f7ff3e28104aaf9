"""Behaviour of the desk-scale trained model beyond the headline metric.

Chance levels for comparison: a crop box of side 26..64 in a 256 x 256 image
catches a random level-0 cell about 3.4% of the time, and a random ranking puts
the source image in the top 5 of 100 candidates 5% of the time.
"""

import numpy as np
import pytest

from lococontrast.cropper import extract_crop, sample_crop
from lococontrast.encoders import cell_center, grid_geometry
from lococontrast.evalkit import similarity_heatmap
from lococontrast.evalkit.metrics import image_stream
from lococontrast.evalkit.retrieval import image_score

QUERIES = 100


@pytest.fixture(scope="module")
def queries(desk_run):
    images = [desk_run.eval.load(i) for i in range(QUERIES)]
    crops = [sample_crop(im.width, im.height, image_stream(0, im.id)) for im in images]
    return images, crops


def test_pasted_crop_is_found_in_another_scene(desk_run, queries):
    images, crops = queries
    hits = 0
    for k, (image, crop) in enumerate(zip(images, crops)):
        patch = extract_crop(image, crop).pixels
        host = images[(k + 1) % QUERIES].pixels.copy()
        a, b = 256 - crop.w - 16, 16
        host[b:b + crop.h, a:a + crop.w] = patch
        z = desk_run.embedder.crop(patch)
        heat = similarity_heatmap(z, desk_run.embedder.pyramid(host), 256, 256)
        x, y = cell_center(grid_geometry(256, 256), heat.argmax[0])
        hits += a <= x <= a + crop.w and b <= y <= b + crop.h
    assert hits / QUERIES >= 0.15


def test_source_image_ranks_high_among_candidates(desk_run, queries):
    images, crops = queries
    maps = [desk_run.embedder.pyramid(im.pixels) for im in images]
    top5 = 0
    for k, (image, crop) in enumerate(zip(images, crops)):
        z = desk_run.embedder.crop(extract_crop(image, crop).pixels)
        scores = np.array([image_score(z, m) for m in maps])
        top5 += (scores > scores[k]).sum() < 5
    assert top5 / QUERIES >= 0.15
