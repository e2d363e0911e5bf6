"""Binary PPM (P6) image I/O for dataset files and visual inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ArtifactFormatError


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) image in [0, 1] as 8-bit P6; values round half-up."""
    h, w, _ = image.shape
    data = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file back to float64 in [0, 1]."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise ArtifactFormatError("not a P6 ppm file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ArtifactFormatError("only 8-bit ppm supported")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0
