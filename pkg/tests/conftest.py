"""Shared fixtures: a tiny generated corpus reused across dataset/cli tests."""

import pytest

from ctbench.config import load_config
from ctbench.dataset import gen_dataset, read_manifest

# Overrides that shrink the default desk corpus to seconds of work: a 32 px
# grid at 2 mm pixels keeps the same 64 mm field of view, so the phantom
# generator and the uniform-zone ROI still apply (scaled to 4,10,12,12).
TINY_OVERRIDES = {
    ("geometry", "grid"): "32",
    ("geometry", "pixel_size_mm"): "2.0",
    ("geometry", "n_views"): "48",
    ("corpus", "n_volumes"): "2",
    ("corpus", "n_slices"): "3",
    ("corpus", "n_train"): "1",
    ("mbir", "max_iters"): "12",
    ("evaluate", "roi_x0"): "4",
    ("evaluate", "roi_y0"): "10",
    ("evaluate", "roi_w"): "12",
    ("evaluate", "roi_h"): "12",
    ("evaluate", "nps_patch"): "8",
    ("evaluate", "nps_stride"): "4",
    ("evaluate", "nps_bins"): "4",
    ("evaluate", "profile_row"): "16",
}


def tiny_config(extra=None):
    overrides = dict(TINY_OVERRIDES)
    if extra:
        overrides.update(extra)
    return load_config(overrides=overrides)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Generate the tiny two-volume corpus once and hand out its manifest."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = tiny_config()
    manifest = gen_dataset(cfg, root)
    return cfg, manifest


@pytest.fixture()
def tiny_manifest(tiny_corpus):
    _, manifest = tiny_corpus
    return read_manifest(manifest.path("manifest.txt"))
