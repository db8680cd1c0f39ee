"""Binary PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, values: np.ndarray, maxval: int = 65535, normalize: bool = True) -> None:
    """Write a 2D array as binary PGM.

    With ``normalize`` the array max maps to ``maxval``; otherwise values are
    taken to lie in ``[0, 1]``. 16-bit samples are big-endian per the Netpbm
    format.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {values.shape}")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    if normalize:
        peak = values.max()
        scaled = values / peak if peak > 0 else np.zeros_like(values)
    else:
        scaled = values
    ints = np.rint(np.clip(scaled, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = values.shape
    with open(Path(path), "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(ints.astype(dtype).tobytes())


def read_pgm(path):
    """Returns ``(array scaled to [0, 1], maxval)``."""
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while data[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(x) for x in fields[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval, maxval
