"""Weights files, PGM/PPM images, dataset directories and report files.

Every writer goes through :func:`atomic_write`, so an interrupted run
leaves either the old file or the new one, never half of either.

Weights file layout (all integers and floats little-endian)::

    magic        4s   b"CAMW"
    version      u16  1
    input rank   u8,  then rank x u32 extents
    init_seed    i64  (-1 when unknown)
    train_seed   i64  (-1 when untrained)
    learn_rate   f64  (0.0 when untrained)
    epochs       u32
    batch_size   u32
    history      32s  SHA-256 of the loss/accuracy history (zeros when untrained)
    layer count  u16
    per layer:   u8 kind code, u8 n_hyper, n_hyper x u32,
                 u8 n_tensors, per tensor: u8 ndim, ndim x u32, f32 data
    crc32        u32  zlib CRC-32 of every preceding byte
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .evaluation import EvalReport
from .network import LAYER_KINDS, Network
from .tensor import DTYPE
from .training import LabeledSample

MAGIC = b"CAMW"
VERSION = 1
KIND_CODES = {"conv2d": 0, "relu": 1, "maxpool2x2": 2, "global_average_pool": 3, "linear": 4}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
MANIFEST = "labels.csv"
REPORT_HEADER = "camlab-report 1"


class WeightsFormatError(ValueError):
    pass


class BadMagicError(WeightsFormatError):
    pass


class ChecksumError(WeightsFormatError):
    pass


class UnsupportedVersionError(WeightsFormatError):
    pass


class WeightsShapeError(WeightsFormatError):
    pass


class DatasetError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- weights ----------------------------------------------------------------

def weights_bytes(net: Network) -> bytes:
    meta = net.metadata
    out = bytearray(MAGIC)
    out += struct.pack("<HB", VERSION, len(net.input_shape))
    out += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    digest = bytes.fromhex(meta["history_digest"]) if "history_digest" in meta else bytes(32)
    out += struct.pack(
        "<qqdII32s",
        int(meta.get("init_seed", -1)),
        int(meta.get("seed", -1)),
        float(meta.get("learning_rate", 0.0)),
        int(meta.get("epochs", 0)),
        int(meta.get("batch_size", 0)),
        digest,
    )
    out += struct.pack("<H", len(net.layers))
    for layer in net.layers:
        hyper = layer.hyper()
        out += struct.pack(f"<BB{len(hyper)}I", KIND_CODES[layer.kind], len(hyper), *hyper)
        out += struct.pack("<B", len(layer.params))
        for p in layer.params:
            out += struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape)
            out += np.ascontiguousarray(p, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_weights(net: Network, path) -> None:
    atomic_write(path, weights_bytes(net))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise WeightsShapeError("file ends inside a declared field or tensor")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def tensor(self):
        (ndim,) = self.take("<B")
        if ndim > 4:
            raise WeightsShapeError(f"tensor rank {ndim} exceeds 4; layer table is misaligned")
        shape = self.take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if self.pos + nbytes > len(self.buf):
            raise WeightsShapeError(f"tensor {shape} needs {nbytes} bytes; file is too short")
        data = np.frombuffer(self.buf, dtype="<f4", count=count, offset=self.pos)
        self.pos += nbytes
        return data.astype(DTYPE).reshape(shape)


def weights_from_bytes(buf: bytes) -> Network:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a CAMW weights file")
    if len(buf) < 10:
        raise ChecksumError("file too short to carry a checksum")
    (stored,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumError("CRC32 mismatch: weights file is corrupt")
    r = _Reader(buf[:-4])
    r.pos = 4
    (version,) = r.take("<H")
    if version != VERSION:
        raise UnsupportedVersionError(f"weights format version {version} (expected {VERSION})")
    (rank,) = r.take("<B")
    input_shape = r.take(f"<{rank}I")
    init_seed, seed, lr, epochs, batch, digest = r.take("<qqdII32s")
    meta = {}
    if init_seed != -1:
        meta["init_seed"] = init_seed
    if seed != -1:
        meta.update(seed=seed, learning_rate=lr, epochs=epochs, batch_size=batch,
                    history_digest=digest.hex())
    (n_layers,) = r.take("<H")
    layers = []
    for _ in range(n_layers):
        code, n_hyper = r.take("<BB")
        if code not in CODE_KINDS:
            raise WeightsFormatError(f"unknown layer kind code {code}")
        hyper = r.take(f"<{n_hyper}I")
        (n_tensors,) = r.take("<B")
        tensors = [r.tensor() for _ in range(n_tensors)]
        cls = LAYER_KINDS[CODE_KINDS[code]]
        try:
            if tensors:
                layers.append(cls(*hyper, *tensors))
            else:
                layers.append(cls(*hyper))
        except (TypeError, ValueError) as e:
            raise WeightsShapeError(f"layer {CODE_KINDS[code]}{hyper}: {e}") from e
    if r.pos != len(r.buf):
        raise WeightsShapeError(f"{len(r.buf) - r.pos} trailing bytes after the last layer")
    try:
        return Network(layers, input_shape, meta)
    except ValueError as e:
        raise WeightsShapeError(str(e)) from e


def load_weights(path) -> Network:
    return weights_from_bytes(Path(path).read_bytes())


# -- netpbm -----------------------------------------------------------------

def to_bytes(values) -> np.ndarray:
    """[0, 1] floats to 8-bit: round(255 * v), ties to even."""
    return np.rint(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def pnm_bytes(pixels: np.ndarray) -> bytes:
    """P5 for ``[H, W]`` uint8, P6 for ``[H, W, 3]``."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    magic = b"P5" if pixels.ndim == 2 else b"P6"
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
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
            raise DatasetError(f"{path}: truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DatasetError(f"{path}: only 8-bit P5/P6 files are supported")
    ch = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return raster.reshape((h, w) if ch == 1 else (h, w, 3))


# -- datasets ---------------------------------------------------------------

def save_dataset(samples, directory) -> None:
    """One P5 (or P6, for 3 channels) image per sample, optional
    ``<name>.mask.pgm``, and a ``labels.csv`` manifest of ``<file>,<label>``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}"
        img = s.image
        pixels = to_bytes(img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0))
        atomic_write(d / f"{name}.pgm", pnm_bytes(pixels))
        if s.mask is not None:
            atomic_write(d / f"{name}.mask.pgm", pnm_bytes(to_bytes(s.mask)))
        lines.append(f"{name}.pgm,{int(s.label)}\n")
    atomic_write(d / MANIFEST, "".join(lines).encode())


def load_image(path) -> np.ndarray:
    px = read_pnm(path).astype(DTYPE) / DTYPE(255)
    return px[None] if px.ndim == 2 else np.ascontiguousarray(px.transpose(2, 0, 1))


def load_dataset(directory, num_classes=None):
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise DatasetError(f"{d} has no {MANIFEST}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            fname, label = line.rsplit(",", 1)
            label = int(label)
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: expected '<filename>,<label>'") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise DatasetError(f"{manifest}:{lineno}: label {label} out of range")
        path = d / fname
        if not path.exists():
            raise DatasetError(f"{manifest}:{lineno}: {fname} does not exist")
        mask_path = path.with_name(path.name[: -len(path.suffix)] + ".mask.pgm")
        mask = None
        if mask_path.exists():
            m = read_pnm(mask_path)
            if not np.all((m == 0) | (m == 255)):
                raise DatasetError(f"{mask_path} is not binary")
            mask = (m == 255).astype(DTYPE)
        samples.append(LabeledSample(load_image(path), label, mask))
    return samples


# -- heatmaps ---------------------------------------------------------------

def export_heatmap(saliency, original, path):
    """Write ``<path>.pgm`` (the normalized map) and ``<path>.ppm``
    (red = map, green/blue = 0.6 x grayscale image). Returns both paths."""
    m = np.asarray(getattr(saliency, "upsampled", saliency), dtype=np.float64)
    img = np.asarray(original, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    if gray.shape != m.shape:
        raise ValueError(f"map {m.shape} and image {gray.shape} differ in size")
    base = Path(path)
    if base.suffix in (".pgm", ".ppm"):
        base = base.with_suffix("")
    pgm, ppm = base.with_name(base.name + ".pgm"), base.with_name(base.name + ".ppm")
    atomic_write(pgm, pnm_bytes(to_bytes(m)))
    g = to_bytes(0.6 * gray)
    atomic_write(ppm, pnm_bytes(np.stack([to_bytes(m), g, g], axis=-1)))
    return pgm, ppm


# -- reports ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("report contains a non-finite value")
        return f"{v:.6f}"
    return str(v)


def report_text(report: EvalReport) -> str:
    lines = [REPORT_HEADER, f"sample_count: {report.sample_count}"]
    for metrics in report.methods.values():
        for k, v in metrics.items():
            _fmt(float(v))  # NaN check before anything is written
    if report.seed is not None:
        lines.append(f"seed: {report.seed}")
    if report.config:
        lines.append("")
        lines.append("[config]")
        lines += [f"{k}: {report.config[k]}" for k in sorted(report.config)]
    for name in sorted(report.methods):
        lines.append("")
        lines.append(f"[method {name}]")
        metrics = report.methods[name]
        lines += [f"{k}: {_fmt(float(metrics[k]))}" for k in sorted(metrics)]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    atomic_write(path, report_text(report).encode())


def parse_report(text: str) -> EvalReport:
    lines = text.splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError("not a camlab report")
    report = EvalReport(sample_count=0)
    section = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            head = line[1:-1]
            if head == "config":
                section = report.config
            elif head.startswith("method "):
                section = report.methods.setdefault(head[len("method "):], {})
            else:
                raise ValueError(f"unknown report section {line!r}")
            continue
        key, _, value = line.partition(": ")
        if section is None:
            if key == "sample_count":
                report.sample_count = int(value)
            elif key == "seed":
                report.seed = int(value)
            else:
                raise ValueError(f"unknown report field {key!r}")
        elif section is report.config:
            section[key] = value
        else:
            section[key] = float(value)
    return report


def read_report(path) -> EvalReport:
    return parse_report(Path(path).read_text())
