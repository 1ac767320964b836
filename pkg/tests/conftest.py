import os
import sys
from dataclasses import replace

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from weee_sort.dataset import (  # noqa: E402
    extract_crops,
    save_crop,
    stratified_split,
    write_manifest,
    read_manifest,
)
from weee_sort.geometry import CLASSES, parse_annotation_file  # noqa: E402
from weee_sort.synthetic import SyntheticSpec, generate_synthetic_dataset  # noqa: E402


def build_synthetic_manifest(root, per_class, seed=0, image_size=96):
    ann = generate_synthetic_dataset(
        SyntheticSpec({c: per_class for c in CLASSES}, image_size=image_size, seed=seed), root / "raw")
    records, _ = parse_annotation_file(ann)
    crops = extract_crops(records)
    for c in crops:
        save_crop(c, root / "crops")
    m = stratified_split(crops, seed=seed)
    m.crops[:] = [replace(e, path=f"crops/{e.path}") for e in m.crops]
    write_manifest(m, root / "manifest.json")
    return read_manifest(root / "manifest.json")


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Four classes x 12 synthetic crops on disk (train 9 / val 2 / test 1 per class)."""
    return build_synthetic_manifest(tmp_path_factory.mktemp("tiny"), 12)
