"""Rebuild the golden dump files byte by byte from the documented layout.

Run from this directory: python3 make_golden.py
"""

import json
import struct

HEADER = {
    "D": 2,
    "dtype": "<f4",
    "flags": {"has_mask_flags": True, "has_sequence_ids": True},
    "label_width": 1,
    "metadata": {"masked": True, "p_mask": 0.3, "seed": 7},
    "source": "golden",
    "version": 1,
}
ROWS = [
    ((1.0, -2.0), (1.0,), 0, 10),
    ((0.5, 0.25), (0.0,), 1, 10),
    ((-3.0, 4.0), (1.0,), 0, 11),
]


def dump_bytes(header, rows):
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = b"SAEDUMP1" + struct.pack("<QQ", len(rows), len(head)) + head
    for x, labels, flag, seq in rows:
        out += struct.pack("<2f", *x) + struct.pack("<1f", *labels) + struct.pack("<BQ", flag, seq)
    return out


if __name__ == "__main__":
    with open("golden_3row.saedump", "wb") as f:
        f.write(dump_bytes(HEADER, ROWS))
    empty = dict(HEADER, metadata={}, source="golden-empty")
    with open("golden_empty.saedump", "wb") as f:
        f.write(dump_bytes(empty, []))
