import json

import numpy as np
import pytest

from pathosyn.core import smooth_mask
from pathosyn.substrate import extract_deviation
from pathosyn.toyworld import (
    DatasetError,
    ToyParams,
    assign_splits,
    generate_corpus,
    generate_subject,
    read_dataset,
    read_manifest,
    write_dataset,
)

FIELDS = ("x", "m", "truth_sub", "truth_dev", "x_ph")


def test_lesion_free_subject():
    rec = generate_subject(ToyParams(blob_count=(0, 0)), 3)
    assert not rec.m.any()
    assert not rec.truth_dev.any()
    p = ToyParams(blob_count=(0, 0), noise_std=0.0)
    rec = generate_subject(p, 3)
    np.testing.assert_array_equal(rec.x, np.clip(rec.truth_sub, 0, 1))


def test_subject_deterministic():
    a = generate_subject(ToyParams(), (7, 1))
    b = generate_subject(ToyParams(), (7, 1))
    for f in FIELDS:
        assert np.array_equal(getattr(a, f), getattr(b, f))
    c = generate_subject(ToyParams(), (7, 2))
    assert not np.array_equal(a.x, c.x)


def test_fixed_amplitude_flat_texture():
    p = ToyParams(noise_std=0.0, amplitude_range=(0.3, 0.3), negative_fraction=0.0, texture_strength=0.0)
    for key in range(5):
        rec = generate_subject(p, key)
        m = rec.m == 1
        diff = rec.x.astype(np.float64) - rec.truth_sub.astype(np.float64)
        assert diff[m].mean() == pytest.approx(0.3, abs=1e-6)


@pytest.mark.parametrize("key", range(10))
def test_subject_invariants(key):
    p = ToyParams()
    rec = generate_subject(p, key)
    assert rec.x.shape == (64, 64) and rec.x.dtype == np.float32
    assert rec.x.min() >= 0 and rec.x.max() <= 1
    assert np.all(rec.truth_dev[rec.m == 0] == 0)
    assert rec.m.any()
    # lesion strictly inside the head: no lesion on the outer frame, background is zero there
    assert not rec.m[0].any() and not rec.m[-1].any() and not rec.m[:, 0].any() and not rec.m[:, -1].any()
    assert np.all(rec.x_ph[rec.m == 0] == rec.x[rec.m == 0])


def test_ground_truth_consistency_noiseless():
    p = ToyParams(noise_std=0.0)
    for key in range(5):
        rec = generate_subject(p, key)
        delta = 100.0
        r = extract_deviation(rec.x.astype(np.float64), rec.truth_sub.astype(np.float64), rec.m, delta)
        np.testing.assert_allclose(r, delta * np.tanh(rec.truth_dev.astype(np.float64) / delta), atol=1e-6)
        np.testing.assert_allclose(r, rec.truth_dev, atol=1e-4)


def test_infeasible_geometry_reports():
    p = ToyParams(blob_radius=(40.0, 40.0))
    with pytest.raises(RuntimeError, match="100 attempts"):
        generate_subject(p, 0)


def test_params_validation_and_scaling():
    with pytest.raises(ValueError):
        ToyParams(blob_count=(2, 1))
    with pytest.raises(ValueError):
        ToyParams(noise_std=-1)
    p = ToyParams.for_resolution(32)
    assert p.resolution == 32 and p.blob_radius == (2.0, 4.0)
    assert generate_subject(p, 0).x.shape == (32, 32)
    assert ToyParams(**json.loads(json.dumps(p.to_dict()))) == p


def test_corpus_lesion_free_fraction():
    recs = generate_corpus(ToyParams.for_resolution(32), 20, lesion_free_frac=0.25)
    assert [r.id for r in recs] == [f"s{i:04d}" for i in range(20)]
    assert sum(not r.has_lesion for r in recs) == 5


# --- splits ---------------------------------------------------------------

def test_split_counts_and_disjointness():
    ids = [f"s{i:04d}" for i in range(200)]
    s = assign_splits(ids, (0.8, 0.1, 0.1), seed=4)
    assert [len(s[k]) for k in ("train", "val", "test")] == [160, 20, 20]
    a, b, c = (set(s[k]) for k in ("train", "val", "test"))
    assert not (a & b or a & c or b & c)
    assert a | b | c == set(ids)
    assert assign_splits(list(reversed(ids)), seed=4) == s
    assert assign_splits(ids, seed=5) != s
    s250 = assign_splits([f"s{i}" for i in range(250)])
    assert [len(s250[k]) for k in ("train", "val", "test")] == [200, 25, 25]


def test_split_validation():
    with pytest.raises(ValueError):
        assign_splits(["a", "b"], (0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        assign_splits(["a", "a"])


# --- dataset I/O ----------------------------------------------------------

@pytest.fixture(scope="module")
def records():
    return generate_corpus(ToyParams.for_resolution(32), 10, lesion_free_frac=0.2)


def test_roundtrip_bit_exact(tmp_path, records):
    manifest = write_dataset(records, tmp_path, extra={"n": 10})
    ds = read_dataset(tmp_path)
    assert len(ds) == 10 and ds.manifest == json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["generator"] == {"n": 10}
    for r in records:
        back = ds[r.id]
        for f in FIELDS:
            a, b = getattr(r, f), getattr(back, f)
            assert a.dtype == b.dtype and np.array_equal(a, b)
    assert sorted(r.id for k in ("train", "val", "test") for r in ds.split(k)) == sorted(r.id for r in records)
    assert ds.split_of(records[0].id) in ("train", "val", "test")
    assert records[0].id in ds and "nope" not in ds


def test_file_layout_is_raw_little_endian(tmp_path, records):
    write_dataset(records[:1], tmp_path)
    r = records[0]
    raw = (tmp_path / f"{r.id}.x.f32").read_bytes()
    assert raw == r.x.astype("<f4").tobytes()
    assert (tmp_path / f"{r.id}.m.u8").read_bytes() == r.m.astype(np.uint8).tobytes()
    for suffix in ("truthsub", "truthdev", "xph"):
        assert (tmp_path / f"{r.id}.{suffix}.f32").stat().st_size == 4 * r.x.size


def test_empty_dataset(tmp_path):
    manifest = write_dataset([], tmp_path)
    assert manifest["subjects"] == []
    assert len(read_dataset(tmp_path)) == 0


def test_checksum_mismatch_named(tmp_path, records):
    write_dataset(records[:2], tmp_path)
    target = tmp_path / f"{records[1].id}.truthdev.f32"
    data = bytearray(target.read_bytes())
    data[0] ^= 0xFF
    target.write_bytes(bytes(data))
    with pytest.raises(DatasetError, match="checksum mismatch.*truthdev"):
        read_dataset(tmp_path)


def test_missing_file_named(tmp_path, records):
    write_dataset(records[:2], tmp_path)
    (tmp_path / f"{records[0].id}.m.u8").unlink()
    with pytest.raises(DatasetError, match=r"missing file .*\.m\.u8"):
        read_dataset(tmp_path)


def test_missing_or_corrupt_manifest(tmp_path):
    with pytest.raises(DatasetError, match="missing manifest"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetError, match="corrupt manifest"):
        read_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(DatasetError, match="format_version"):
        read_manifest(tmp_path)


def test_write_rejects_bad_records(tmp_path, records):
    bad = generate_subject(ToyParams.for_resolution(16), 0, subject_id="odd")
    with pytest.raises(ValueError):
        write_dataset([records[0], bad], tmp_path)
    with pytest.raises(ValueError):
        write_dataset(records[:1], tmp_path, resolution=64)


def test_blend_map_of_generated_lesions_stays_in_frame():
    rec = generate_subject(ToyParams(), 11)
    S = smooth_mask(rec.m, 2.0)
    assert S[0].max() == 0 and S[-1].max() == 0
