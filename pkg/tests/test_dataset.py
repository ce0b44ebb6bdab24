import numpy as np
import pytest

from cardioseg.cascade import PathologyClass
from cardioseg.dataset import (
    CaseRecord,
    DatasetError,
    DatasetSplit,
    load_dataset,
    make_phantom,
    write_case,
    write_phantom_tree,
)
from cardioseg.masks import Structure


def annulus_area(record: CaseRecord, slice_index: int = -1) -> int:
    return int(
        np.count_nonzero(record.ed_gt[slice_index].grid.data == Structure.MYO.label)
    )


class TestPhantom:
    def test_determinism(self):
        a = make_phantom(7, PathologyClass.NOR, dims=(4, 64, 64))
        b = make_phantom(7, PathologyClass.NOR, dims=(4, 64, 64))
        np.testing.assert_array_equal(a.ed_volume.data, b.ed_volume.data)
        np.testing.assert_array_equal(a.es_volume.data, b.es_volume.data)
        for ma, mb in zip(a.ed_gt, b.ed_gt):
            np.testing.assert_array_equal(ma.grid.data, mb.grid.data)
        assert a.height == b.height and a.weight == b.weight

    def test_seeds_differ(self):
        a = make_phantom(1, PathologyClass.NOR, dims=(4, 64, 64))
        b = make_phantom(2, PathologyClass.NOR, dims=(4, 64, 64))
        assert not np.array_equal(a.ed_volume.data, b.ed_volume.data)

    def test_structures_present_and_valid(self):
        for group in PathologyClass:
            record = make_phantom(3, group, dims=(5, 96, 96))
            basal = record.ed_gt[-1].grid.data
            present = set(np.unique(basal).tolist())
            assert {0.0, 1.0, 2.0, 3.0} <= present | {0.0}
            for s in Structure:
                assert (basal == s.label).any(), f"{group}: missing {s.name}"

    def test_hcm_wall_thicker_than_nor(self):
        nor = make_phantom(11, PathologyClass.NOR, dims=(4, 96, 96))
        hcm = make_phantom(11, PathologyClass.HCM, dims=(4, 96, 96))
        assert annulus_area(hcm) > annulus_area(nor)

    def test_dcm_cavity_larger_than_nor(self):
        nor = make_phantom(11, PathologyClass.NOR, dims=(4, 96, 96))
        dcm = make_phantom(11, PathologyClass.DCM, dims=(4, 96, 96))
        lv = Structure.LV.label
        assert np.count_nonzero(dcm.ed_gt[-1].grid.data == lv) > np.count_nonzero(
            nor.ed_gt[-1].grid.data == lv
        )

    def test_arv_rv_larger_than_nor(self):
        nor = make_phantom(11, PathologyClass.NOR, dims=(4, 96, 96))
        arv = make_phantom(11, PathologyClass.ARV, dims=(4, 96, 96))
        rv = Structure.RV.label
        assert np.count_nonzero(arv.ed_gt[-1].grid.data == rv) > np.count_nonzero(
            nor.ed_gt[-1].grid.data == rv
        )

    def test_es_cavity_contracts(self):
        record = make_phantom(5, PathologyClass.NOR, dims=(4, 96, 96))
        lv = Structure.LV.label
        ed_area = np.count_nonzero(record.ed_gt[-1].grid.data == lv)
        es_area = np.count_nonzero(record.es_gt[-1].grid.data == lv)
        assert es_area < ed_area

    def test_apical_taper(self):
        record = make_phantom(5, PathologyClass.NOR, dims=(6, 96, 96))
        areas = [np.count_nonzero(m.grid.data > 0) for m in record.ed_gt]
        assert areas[0] < areas[-1]

    def test_record_invariants_enforced(self):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 32, 32))
        with pytest.raises(ValueError):
            CaseRecord(
                patient_id="x",
                group=PathologyClass.NOR,
                ed_frame=1,
                es_frame=1,
                ed_volume=record.ed_volume,
                es_volume=record.es_volume,
            )
        with pytest.raises(ValueError):
            CaseRecord(
                patient_id="x",
                group=PathologyClass.NOR,
                ed_frame=1,
                es_frame=2,
                ed_volume=record.ed_volume,
                es_volume=record.es_volume,
                ed_gt=record.ed_gt[:-1],  # one mask short
            )


class TestLoader:
    def test_round_trip_two_patients(self, tmp_path):
        for i, group in ((1, PathologyClass.NOR), (2, PathologyClass.DCM)):
            record = make_phantom(i, group, dims=(3, 48, 48), patient_id=f"patient{i:03d}")
            write_case(record, tmp_path / f"patient{i:03d}")
        records, split = load_dataset(tmp_path)
        assert [r.patient_id for r in records] == ["patient001", "patient002"]
        assert records[0].group is PathologyClass.NOR
        assert records[1].group is PathologyClass.DCM
        assert split.train == ("patient001", "patient002")
        assert split.test == ()

    def test_volumes_and_gt_survive_disk(self, tmp_path):
        record = make_phantom(4, PathologyClass.HCM, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        loaded, _ = load_dataset(tmp_path)
        back = loaded[0]
        np.testing.assert_allclose(back.ed_volume.data, record.ed_volume.data, atol=1e-6)
        assert back.ed_frame == 1 and back.es_frame == 2
        for ma, mb in zip(back.ed_gt, record.ed_gt):
            np.testing.assert_array_equal(ma.grid.data, mb.grid.data)
        assert back.height == record.height

    def test_rv_token_maps_to_arv(self, tmp_path):
        record = make_phantom(9, PathologyClass.ARV, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        text = (tmp_path / "patient001" / "Info.cfg").read_text()
        assert "Group: RV" in text
        loaded, _ = load_dataset(tmp_path)
        assert loaded[0].group is PathologyClass.ARV

    def test_missing_metadata_key(self, tmp_path):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        cfg = tmp_path / "patient001" / "Info.cfg"
        cfg.write_text(
            "\n".join(
                line for line in cfg.read_text().splitlines() if not line.startswith("ES")
            )
        )
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path)
        assert exc.value.patient == "patient001"
        assert exc.value.key == "ES"

    def test_bad_frame_index(self, tmp_path):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        cfg = tmp_path / "patient001" / "Info.cfg"
        cfg.write_text(cfg.read_text().replace("ED: 1", "ED: one"))
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path)
        assert exc.value.key == "ED"

    def test_unknown_group(self, tmp_path):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        cfg = tmp_path / "patient001" / "Info.cfg"
        cfg.write_text(cfg.read_text().replace("Group: NOR", "Group: XYZ"))
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path)
        assert exc.value.key == "Group"

    def test_missing_gt_tolerated(self, tmp_path):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        for gt in (tmp_path / "patient001").glob("*_gt.nii.gz"):
            gt.unlink()
        loaded, _ = load_dataset(tmp_path)
        assert loaded[0].ed_gt is None and loaded[0].es_gt is None

    def test_missing_volume_is_error(self, tmp_path):
        record = make_phantom(1, PathologyClass.NOR, dims=(3, 48, 48), patient_id="patient001")
        write_case(record, tmp_path / "patient001")
        (tmp_path / "patient001" / "patient001_frame01.nii.gz").unlink()
        with pytest.raises(DatasetError) as exc:
            load_dataset(tmp_path)
        assert exc.value.key == "ED"

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nope")

    def test_split_disjointness_enforced(self):
        with pytest.raises(ValueError):
            DatasetSplit(("a", "b"), ("b",))


class TestPhantomTree:
    def test_full_tree_composition(self, tmp_path):
        split = write_phantom_tree(
            tmp_path, per_class=3, test_per_class=1, seed=0, dims=(3, 48, 48)
        )
        records, loaded_split = load_dataset(tmp_path)
        assert len(records) == 15
        assert len(loaded_split.train) == 10
        assert len(loaded_split.test) == 5
        assert set(loaded_split.train) == set(split.train)
        assert set(loaded_split.test) == set(split.test)
        by_class = {}
        for r in records:
            by_class.setdefault(r.group, 0)
            by_class[r.group] += 1
        assert all(count == 3 for count in by_class.values())
        assert len(by_class) == 5
