import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sae_forge.errors import BadMagicError, ConfigError, DimensionError, HeaderMismatchError, TruncatedFileError
from sae_forge.ingest import (
    DumpHeader,
    DumpReader,
    DumpRow,
    ShuffleBuffer,
    export_synthetic,
    read_dump,
    stream_batches,
    write_dump,
)
from sae_forge.synthgen import build_model

DATA = os.path.join(os.path.dirname(__file__), "data")
GOLDEN_ROWS = [
    ((1.0, -2.0), (1.0,), False, 10),
    ((0.5, 0.25), (0.0,), True, 10),
    ((-3.0, 4.0), (1.0,), False, 11),
]


def golden_header(**kw):
    h = dict(
        d=2,
        label_width=1,
        has_mask_flags=True,
        has_sequence_ids=True,
        source="golden",
        metadata={"masked": True, "p_mask": 0.3, "seed": 7},
    )
    h.update(kw)
    return DumpHeader(**h)


def test_golden_three_rows_read():
    header, rows = read_dump(os.path.join(DATA, "golden_3row.saedump"))
    rows = list(rows)
    assert header.d == 2 and header.row_count == 3 and header.record_size == 21
    assert header.metadata["p_mask"] == 0.3
    for got, (x, lab, flag, seq) in zip(rows, GOLDEN_ROWS):
        np.testing.assert_array_equal(got.x, x)
        np.testing.assert_array_equal(got.labels, lab)
        assert got.mask_flag is flag and got.sequence_id == seq


def test_golden_files_are_reproduced_bytewise(tmp_path):
    out = tmp_path / "g.saedump"
    write_dump(out, golden_header(), [DumpRow(*r) for r in GOLDEN_ROWS])
    assert out.read_bytes() == open(os.path.join(DATA, "golden_3row.saedump"), "rb").read()
    out = tmp_path / "e.saedump"
    assert write_dump(out, golden_header(metadata={}, source="golden-empty"), []) == 0
    assert out.read_bytes() == open(os.path.join(DATA, "golden_empty.saedump"), "rb").read()


def test_golden_layout_offsets():
    raw = open(os.path.join(DATA, "golden_3row.saedump"), "rb").read()
    assert raw[:8] == b"SAEDUMP1"
    count, hlen = struct.unpack("<QQ", raw[8:24])
    assert count == 3
    body = raw[24 + hlen :]
    assert len(body) == 3 * 21
    x0, x1, lab, flag, seq = struct.unpack("<3fBQ", body[21:42])
    assert (x0, x1, lab, flag, seq) == (0.5, 0.25, 0.0, 1, 10)


def test_empty_golden_reads():
    reader = DumpReader(os.path.join(DATA, "golden_empty.saedump"))
    assert len(reader) == 0
    assert list(reader.iter_rows()) == []
    assert list(stream_batches(reader, 4)) == []


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(0, 40),
    st.integers(0, 3),
    st.booleans(),
    st.booleans(),
    st.integers(0, 2**32),
)
def test_round_trip_is_bitwise(tmp_path_factory, d, n, lw, flags, seqs, seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((n, d)).astype(np.float32)
    labels = g.random((n, lw)).astype(np.float32)
    rows = [
        DumpRow(x[i], labels[i] if lw else None, bool(i % 2) if flags else None, i * 3 if seqs else None)
        for i in range(n)
    ]
    header = DumpHeader(d=d, label_width=lw, has_mask_flags=flags, has_sequence_ids=seqs)
    path = tmp_path_factory.mktemp("rt") / "d.saedump"
    write_dump(path, header, rows)
    h2, back = read_dump(path)
    back = list(back)
    assert h2.row_count == n and len(back) == n
    for a, b in zip(rows, back):
        assert a.x.tobytes() == b.x.tobytes()
        if lw:
            assert a.labels.tobytes() == b.labels.tobytes()
        assert a.mask_flag == b.mask_flag and a.sequence_id == b.sequence_id


def test_writer_rejects_wrong_width(tmp_path):
    with pytest.raises(DimensionError):
        write_dump(tmp_path / "x", DumpHeader(d=3), [DumpRow(np.zeros(2), None, None, None)])


def _golden_bytes():
    return open(os.path.join(DATA, "golden_3row.saedump"), "rb").read()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTADUMP" + _golden_bytes()[8:])
    with pytest.raises(BadMagicError):
        DumpReader(p)


def test_truncated_payload_reports_offset(tmp_path):
    raw = _golden_bytes()
    p = tmp_path / "trunc"
    p.write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError) as err:
        DumpReader(p)
    hlen = struct.unpack("<Q", raw[16:24])[0]
    assert err.value.offset == 24 + hlen + 2 * 21  # two complete records survive


def test_truncated_header(tmp_path):
    p = tmp_path / "trunc"
    p.write_bytes(_golden_bytes()[:40])
    with pytest.raises(TruncatedFileError):
        DumpReader(p)


def test_extra_bytes_and_bad_header(tmp_path):
    p = tmp_path / "extra"
    p.write_bytes(_golden_bytes() + b"\x00")
    with pytest.raises(HeaderMismatchError):
        DumpReader(p)
    raw = bytearray(_golden_bytes())
    raw[24] = ord("[")  # header no longer a JSON object
    p.write_bytes(bytes(raw))
    with pytest.raises(HeaderMismatchError):
        DumpReader(p)


def test_row_count_mismatch_detected(tmp_path):
    raw = bytearray(_golden_bytes())
    raw[8:16] = struct.pack("<Q", 4)
    p = tmp_path / "count"
    p.write_bytes(bytes(raw))
    with pytest.raises(TruncatedFileError):
        DumpReader(p)


def _five_row_dump(tmp_path, n=5):
    p = tmp_path / "five"
    rows = [DumpRow(np.array([float(i)], np.float32), None, None, None) for i in range(n)]
    write_dump(p, DumpHeader(d=1), rows)
    return DumpReader(p, chunk_rows=2)


def test_capacity_one_keeps_file_order(tmp_path):
    reader = _five_row_dump(tmp_path)
    batches = list(stream_batches(reader, 2, ShuffleBuffer(1, seed=3)))
    assert [b.x[:, 0].tolist() for b in batches] == [[0, 1], [2, 3], [4]]
    assert [b.partial for b in batches] == [False, False, True]


def test_shuffle_is_deterministic_and_a_permutation(tmp_path):
    reader = _five_row_dump(tmp_path, 100)
    a = np.concatenate([b.x[:, 0] for b in stream_batches(reader, 7, ShuffleBuffer(4, seed=1))])
    b = np.concatenate([b.x[:, 0] for b in stream_batches(reader, 7, ShuffleBuffer(4, seed=1))])
    c = np.concatenate([b.x[:, 0] for b in stream_batches(reader, 7, ShuffleBuffer(4, seed=1), epoch=1)])
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    np.testing.assert_array_equal(np.sort(a), np.arange(100))
    assert not np.array_equal(a, np.arange(100))


def test_shuffle_buffer_validation():
    with pytest.raises(ConfigError):
        ShuffleBuffer(0)


def test_export_synthetic_records_masking(tmp_path):
    model, h = build_model()
    p = tmp_path / "syn"
    header = export_synthetic(p, model, h, seed=2, n_rows=64 * 40, seq_len=64, p_mask=0.3, chunk_rows=1000)
    reader = DumpReader(p)
    assert reader.header.metadata == {"p_mask": 0.3, "masked": True, "seed": 2}
    assert header.row_count == 64 * 40
    flags = np.concatenate([r["mask"] for r in reader.iter_records()])
    assert abs(flags.mean() - 0.3) < 0.03
    x = np.concatenate([r["x"] for r in reader.iter_records()])
    from sae_forge.synthgen import generate_rows

    assert x.tobytes() == generate_rows(model, h, 2, "export", 64 * 40, 64, 0.3).x.tobytes()
