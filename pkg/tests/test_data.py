import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pneumollm.data import (BadMagicError, Dataset, DatasetFormatError, Sample, TruncatedFileError,
                            UnsupportedVersionError, decode_dataset, export_csv,
                            generate_synthetic, latent_direction, load_dataset, save_dataset)
from pneumollm.metrics import auc_trapezoid


def test_cohort_counts():
    ds = generate_synthetic(n=630, pos_ratio=401 / 630, separation=4.0, seed=7)
    assert len(ds) == 630
    assert ds.class_counts() == {"0": 229, "1": 401}
    assert ds.metadata["counts"] == ds.class_counts()
    assert len(set(ds.patients)) == 210


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 200), ratio=st.floats(0.1, 0.9), seed=st.integers(0, 1000))
def test_positive_count_rounding(n, ratio, seed):
    n_pos = int(round(n * ratio))
    if n_pos in (0, n):
        return
    ds = generate_synthetic(n=n, pos_ratio=ratio, patients=max(2, n // 3), seed=seed, feat_dim=4)
    assert int(ds.labels.sum()) == n_pos


def test_patients_are_single_class():
    ds = generate_synthetic(seed=3)
    by = {}
    for s in ds.samples:
        by.setdefault(s.patient_id, set()).add(s.label)
    assert all(len(v) == 1 for v in by.values())
    # round-robin: within a class, patient sizes differ by at most one
    for label in (0, 1):
        sizes = [ds.patients.count(p) for p, v in by.items() if v == {label}]
        assert max(sizes) - min(sizes) <= 1


def test_generation_is_deterministic():
    assert generate_synthetic(seed=5) == generate_synthetic(seed=5)
    assert generate_synthetic(seed=5) != generate_synthetic(seed=6)


def test_zero_separation_probe_is_chance():
    ds = generate_synthetic(separation=0.0, seed=11)
    auc = auc_trapezoid(ds.features @ latent_direction(ds), ds.labels)
    assert abs(auc - 0.5) <= 0.07


def test_separation_six_probe_is_nearly_perfect():
    ds = generate_synthetic(separation=6.0, seed=11)
    assert auc_trapezoid(ds.features @ latent_direction(ds), ds.labels) > 0.99


@pytest.mark.parametrize("kw", [dict(pos_ratio=0.0), dict(pos_ratio=1.0), dict(separation=-1),
                                dict(patients=700), dict(patients=1), dict(n=1)])
def test_invalid_generator_args(kw):
    with pytest.raises(ValueError):
        generate_synthetic(**kw)


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample("", np.zeros(2), 0)
    with pytest.raises(ValueError):
        Sample("P1", np.zeros(2), 2)
    with pytest.raises(ValueError):
        Sample("P1", np.array([0.0, np.inf]), 1)


def test_metadata_counts_must_agree():
    with pytest.raises(ValueError):
        Dataset([Sample("P1", np.zeros(2), 1)], {"counts": {"0": 1, "1": 0}})


def test_round_trip(tmp_path):
    ds = generate_synthetic(n=50, patients=20, seed=2)
    save_dataset(ds, tmp_path / "d.pnds")
    back = load_dataset(tmp_path / "d.pnds")
    assert back == ds
    assert back.features.tobytes() == ds.features.tobytes()


def test_truncation_is_an_error(tmp_path):
    ds = generate_synthetic(n=20, patients=10, seed=2)
    save_dataset(ds, tmp_path / "d.pnds")
    raw = (tmp_path / "d.pnds").read_bytes()
    for cut in (5, 10, 40, len(raw) - 1):
        with pytest.raises(TruncatedFileError):
            decode_dataset(raw[:cut])


def test_short_header_is_bad_magic():
    with pytest.raises(BadMagicError):
        decode_dataset(b"PN")


def test_bad_magic_and_version():
    with pytest.raises(BadMagicError):
        decode_dataset(b"XXXX1" + b"\0" * 12)
    with pytest.raises(UnsupportedVersionError):
        decode_dataset(b"PNDS2" + b"\0" * 12)


def test_trailing_bytes_rejected(tmp_path):
    ds = generate_synthetic(n=20, patients=10, seed=2)
    save_dataset(ds, tmp_path / "d.pnds")
    with pytest.raises(DatasetFormatError):
        decode_dataset((tmp_path / "d.pnds").read_bytes() + b"\0")


def test_hand_encoded_fixture():
    meta = b'{"note":"x"}'
    raw = (b"PNDS1"
           + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + len(meta).to_bytes(4, "little")
           + meta
           + (3).to_bytes(2, "little") + b"abc"
           + b"\x01"
           + bytes.fromhex("000000000000f03f")   # 1.0
           + bytes.fromhex("00000000000004c0"))  # -2.5
    ds = decode_dataset(raw)
    assert ds.metadata == {"note": "x"}
    (s,) = ds.samples
    assert s.patient_id == "abc" and s.label == 1
    assert s.features.tolist() == [1.0, -2.5]


def test_writer_matches_hand_layout(tmp_path):
    ds = Dataset([Sample("P7", np.array([0.5]), 0)], {})
    save_dataset(ds, tmp_path / "one.pnds")
    expected = (b"PNDS1" + struct.pack("<III", 1, 1, 2) + b"{}"
                + struct.pack("<H", 2) + b"P7" + b"\x00" + struct.pack("<d", 0.5))
    assert (tmp_path / "one.pnds").read_bytes() == expected


def test_csv_export(tmp_path):
    ds = generate_synthetic(n=6, patients=3, seed=1, feat_dim=3)
    export_csv(ds, tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "patient_id,label,f0,f1,f2"
    first = lines[1].split(",")
    assert first[0] == ds.samples[0].patient_id
    assert float(first[2]) == ds.samples[0].features[0]
    assert len(lines) == 7
    assert json.loads(json.dumps(ds.metadata)) == ds.metadata
