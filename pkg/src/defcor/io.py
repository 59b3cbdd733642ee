"""Readers and writers for the on-disk formats.

* ``DFF1`` flow files: magic ``DFF1``, u32 LE width, u32 LE height, then
  ``H*W`` pairs of f32 LE ``(dx, dy)`` in row-major order.
* binary PGM (P5, maxval 255) for images and masks, binary PPM (P6) for
  colour output.
* CSV for interface polylines (``interface_id,x,y``) and palpation traces
  (``t_s,lambda_z_mm,force_n``).
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

FLOW_MAGIC = b"DFF1"


class FormatError(ValueError):
    pass


def write_flow(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must have shape (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: not a DFF1 flow file")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def _to_u8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    return data[pos + 1:], w, h


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) image as binary PGM; floats are rounded and clipped."""
    img = _to_u8(image)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P5")
    if len(body) < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, image: np.ndarray) -> None:
    img = _to_u8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    body, w, h = _read_netpbm(path, b"P6")
    if len(body) < 3 * w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body[:3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


def write_interfaces(path, polylines) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["interface_id", "x", "y"])
        for i, line in enumerate(polylines):
            for x, y in np.asarray(line, dtype=np.float64):
                writer.writerow([i, repr(float(x)), repr(float(y))])


def read_interfaces(path) -> list[np.ndarray]:
    groups: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["interface_id", "x", "y"]:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            groups.setdefault(int(row["interface_id"]), []).append(
                (float(row["x"]), float(row["y"])))
    return [np.array(groups[k]) for k in sorted(groups)]


def write_palpation(path, t_s, lambda_z_mm, force_n) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_s", "lambda_z_mm", "force_n"])
        for row in zip(t_s, lambda_z_mm, force_n):
            writer.writerow([repr(float(v)) for v in row])


def read_palpation(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(lambda_z_mm, force_n)`` columns of a palpation CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"lambda_z_mm", "force_n"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        rows = [(float(r["lambda_z_mm"]), float(r["force_n"])) for r in reader]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]
