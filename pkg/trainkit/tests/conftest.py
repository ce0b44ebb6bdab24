"""Shared fixtures: synthetic phantom dataset trees on disk.

The trees are written through the analysis engine's public generator so
the two packages meet only at the on-disk dataset layout, exactly as in
production.
"""

import pytest

from cardioseg.cascade import PathologyClass
from cardioseg.dataset import make_phantom, write_case


@pytest.fixture(scope="session")
def five_slice_tree(tmp_path_factory):
    """One case, ground truth on the five ED slices only."""
    root = tmp_path_factory.mktemp("segdata")
    record = make_phantom(5, PathologyClass.NOR, dims=(5, 64, 64), patient_id="patient001")
    write_case(record, root / "training" / "patient001")
    es_gt = root / "training" / "patient001" / "patient001_frame02_gt.nii.gz"
    es_gt.unlink()
    return root


@pytest.fixture(scope="session")
def eight_case_tree(tmp_path_factory):
    """Four MINF and four DCM phantoms: the two class groups of stage 4."""
    root = tmp_path_factory.mktemp("clfdata")
    i = 1
    for group in (PathologyClass.MINF, PathologyClass.DCM):
        for _ in range(4):
            pid = f"patient{i:03d}"
            write_case(
                make_phantom(10 + i, group, dims=(3, 64, 64), patient_id=pid),
                root / "training" / pid,
            )
            i += 1
    return root


@pytest.fixture(scope="session")
def two_case_tree(tmp_path_factory):
    """Minimal stage-4 dataset for mechanism (not quality) tests."""
    root = tmp_path_factory.mktemp("tinydata")
    for i, group in ((1, PathologyClass.MINF), (2, PathologyClass.DCM)):
        pid = f"patient{i:03d}"
        write_case(
            make_phantom(30 + i, group, dims=(3, 64, 64), patient_id=pid),
            root / "training" / pid,
        )
    return root
