"""Dataset ingestion, synthetic blob corpora and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Sample contents violate the dataset conventions."""


class IngestionError(DataError):
    """Dataset directory is missing files."""


@dataclass
class SegmentationSample:
    image: np.ndarray  # H×W×C in [0, 1]
    mask: np.ndarray  # H×W integer labels
    identifier: str = ""

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f"sample {self.identifier!r}: image {self.image.shape[:2]} vs mask {self.mask.shape}"
            )

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.image.transpose(2, 0, 1))


def stack_batch(samples: Sequence[SegmentationSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.chw() for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


# ------------------------------------------------------------------ image io


def read_pgm(path: Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    count = width * height
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width).astype(np.int64), maxval


def write_pgm(path: Path, array: np.ndarray, maxval: int = 255) -> None:
    array = np.asarray(array)
    h, w = array.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def _read_image(path: Path) -> tuple[np.ndarray, int]:
    if path.suffix == ".pgm":
        return read_pgm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "I;16", "I"):
            im = im.convert("RGB") if "A" in im.mode or im.mode == "P" else im.convert("L")
        arr = np.asarray(im)
        maxval = 65535 if arr.dtype == np.uint16 or im.mode.startswith("I") else 255
    return arr.astype(np.int64), maxval


def _find(directory: Path, stem: str) -> Optional[Path]:
    for ext in (".png", ".pgm"):
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_dataset(directory, num_classes: int = 2, binarize: bool = False) -> list[SegmentationSample]:
    """Read ``<id>.img.{png,pgm}`` / ``<id>.mask.{png,pgm}`` pairs, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"dataset directory {directory} does not exist")
    ids = set()
    for p in directory.iterdir():
        for kind in (".img", ".mask"):
            if p.suffix in (".png", ".pgm") and p.stem.endswith(kind):
                ids.add(p.stem[: -len(kind)])
    samples = []
    for ident in sorted(ids):
        img_path = _find(directory, f"{ident}.img")
        mask_path = _find(directory, f"{ident}.mask")
        if img_path is None or mask_path is None:
            missing = "image" if img_path is None else "mask"
            raise IngestionError(f"sample {ident!r}: {missing} file is missing")
        img, maxval = _read_image(img_path)
        image = img.astype(np.float64) / maxval
        mask, _ = _read_image(mask_path)
        if mask.ndim == 3:
            mask = mask[..., 0]
        if binarize:
            mask = (mask > 0).astype(np.int64)
        if mask.min() < 0 or mask.max() >= num_classes:
            raise DataError(
                f"sample {ident!r}: mask labels span [{mask.min()}, {mask.max()}] "
                f"but num_classes={num_classes} (set binarize for 0/255 masks)"
            )
        if image.shape[:2] != mask.shape:
            raise DataError(f"sample {ident!r}: image {image.shape[:2]} vs mask {mask.shape}")
        samples.append(SegmentationSample(image, mask, ident))
    return samples


def save_dataset(samples: Sequence[SegmentationSample], directory) -> None:
    """Write samples as 8-bit PGM pairs (single-channel images only)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.image.shape[2] != 1:
            raise DataError("save_dataset writes grayscale PGM; image has more than one channel")
        write_pgm(directory / f"{s.identifier}.img.pgm", np.round(s.image[..., 0] * 255))
        write_pgm(directory / f"{s.identifier}.mask.pgm", s.mask)


# ------------------------------------------------------------ synthetic data


def _synthetic_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 6))):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * size
        ry, rx = rng.uniform(0.06, 0.2, size=2) * size
        if rng.random() < 0.5:
            angle = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * np.cos(angle) + dy * np.sin(angle)
            v = -dx * np.sin(angle) + dy * np.cos(angle)
            shape = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        else:
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        mask |= shape
    if not mask.any():
        mask[size // 2, size // 2] = True
    background = rng.uniform(0.15, 0.35)
    foreground = rng.uniform(0.6, 0.85)
    image = np.where(mask, foreground, background) + rng.normal(0, 0.08, size=(size, size))
    return np.clip(image, 0.0, 1.0), mask.astype(np.int64)


def generate_synthetic(n: int, size: int = 64, seed: int = 0) -> list[SegmentationSample]:
    """``n`` noisy grayscale images with 1-5 ellipses/rectangles; masks are exact interiors."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        image, mask = _synthetic_one(rng, size)
        samples.append(SegmentationSample(image[:, :, None], mask, f"syn{i:04d}"))
    return samples


def split(samples: Sequence[SegmentationSample], val_fraction: float, seed: int):
    """Deterministic train/held-out split."""
    samples = list(samples)
    n_val = int(round(len(samples) * val_fraction))
    if val_fraction > 0 and len(samples) > 1:
        n_val = min(max(n_val, 1), len(samples) - 1)
    order = np.random.default_rng(seed).permutation(len(samples))
    val = [samples[i] for i in sorted(order[:n_val])]
    train = [samples[i] for i in sorted(order[n_val:])]
    return train, val


# -------------------------------------------------------------- checkpoints

MAGIC = b"UCTN"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def encode_checkpoint(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise TypeError(f"tensor {name!r}: dtype {arr.dtype} is not float32/float64")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 16:
        raise ChecksumError("checkpoint is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC32 mismatch: checkpoint is corrupted or truncated")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        out[name] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return out


def save_checkpoint(params: Mapping[str, np.ndarray], path, config=None) -> None:
    """Write tensors in the binary layout; a ``.json`` sidecar echoes the model config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    if config is not None:
        from dataclasses import asdict

        sidecar = path.with_suffix(path.suffix + ".json")
        sidecar.write_text(json.dumps(asdict(config), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint_config(path) -> Optional[dict]:
    sidecar = Path(str(path) + ".json")
    return json.loads(sidecar.read_text()) if sidecar.exists() else None
