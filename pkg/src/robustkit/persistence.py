"""Binary file formats: tensors, checkpoints, datasets and 8-bit PGM/PPM images.

Tensor blob ("RTNSR1")::

    b"RTNSR1" | u8 dtype (0 = float32, 1 = float64) | u8 rank | rank * u32 dims | data

Checkpoint ("RCKPT1")::

    b"RCKPT1" | u32 length | UTF-8 ``key=value`` lines | u32 parameter count |
    per parameter: u16 name length | UTF-8 name | tensor blob

Dataset file: an inputs tensor blob followed by a labels tensor blob.
All integers and scalars are little-endian.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .data import Dataset, DataError
from .models import Model, ModelConfig, _layout

TENSOR_MAGIC = b"RTNSR"
CHECKPOINT_MAGIC = b"RCKPT"
VERSION = b"1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed file contents."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def _take(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    end = offset + size
    if end > len(buf):
        raise TruncatedError(f"truncated while reading {what}: need {size} bytes at offset {offset}, "
                             f"have {max(0, len(buf) - offset)}")
    return buf[offset:end], end


def _check_magic(buf: bytes, offset: int, magic: bytes, what: str) -> int:
    head, offset = _take(buf, offset, len(magic) + 1, f"{what} header")
    if head[:len(magic)] != magic:
        raise BadMagicError(f"not a {what}: bad magic {head[:len(magic)]!r}, expected {magic!r}")
    if head[len(magic):] != VERSION:
        raise VersionMismatchError(
            f"{what} format version {head[len(magic):]!r} is not supported (expected {VERSION!r}); "
            "regenerate the file with this version of the tools")
    return offset


# ---------------------------------------------------------------------------
# tensors

def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float64)
    if arr.ndim > 255 or any(d < 1 for d in arr.shape):
        raise FormatError(f"cannot encode shape {arr.shape}")
    header = TENSOR_MAGIC + VERSION + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    data = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes()
    return header + dims + data


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor blob starting at ``offset``; returns the array and the end offset."""
    offset = _check_magic(buf, offset, TENSOR_MAGIC, "tensor blob")
    head, offset = _take(buf, offset, 2, "tensor dtype/rank")
    code, rank = struct.unpack("<BB", head)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    raw, offset = _take(buf, offset, 4 * rank, "tensor dims")
    shape = struct.unpack(f"<{rank}I", raw)
    if any(d < 1 for d in shape):
        raise FormatError(f"tensor dims must be positive, got {shape}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    raw, offset = _take(buf, offset, count * dt.itemsize, "tensor data")
    arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return arr, offset


def save_tensor(arr, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor blob")
    return arr


# ---------------------------------------------------------------------------
# checkpoints

def model_config_items(config: ModelConfig, dtype) -> dict[str, str]:
    return {
        "kind": config.kind,
        "input_shape": ",".join(map(str, config.input_shape)),
        "widths": ",".join(map(str, config.widths)),
        "num_classes": str(config.num_classes),
        "blocks_per_stage": str(config.blocks_per_stage),
        "dtype": np.dtype(dtype).name,
    }


def model_config_from_items(items: dict[str, str]) -> tuple[ModelConfig, str]:
    try:
        cfg = ModelConfig(
            kind=items["kind"],
            input_shape=tuple(int(v) for v in items["input_shape"].split(",")),
            widths=tuple(int(v) for v in items["widths"].split(",") if v),
            num_classes=int(items["num_classes"]),
            blocks_per_stage=int(items.get("blocks_per_stage", "1")),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model config block: {exc}") from None
    return cfg, items.get("dtype", "float32")


def _kv_block(items: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in items.items()).encode("utf-8")


def _parse_kv_block(raw: bytes) -> dict[str, str]:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config block is not UTF-8: {exc}") from None
    items = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"bad config line {line!r}")
        k, v = line.split("=", 1)
        items[k] = v
    return items


def checkpoint_to_bytes(model: Model) -> bytes:
    block = _kv_block(model_config_items(model.config, model.dtype))
    parts = [CHECKPOINT_MAGIC + VERSION, struct.pack("<I", len(block)), block,
             struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, tensor_to_bytes(value)]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Model:
    offset = _check_magic(buf, 0, CHECKPOINT_MAGIC, "checkpoint")
    raw, offset = _take(buf, offset, 4, "config length")
    (length,) = struct.unpack("<I", raw)
    raw, offset = _take(buf, offset, length, "config block")
    config, _ = model_config_from_items(_parse_kv_block(raw))
    try:
        config.validate()
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    raw, offset = _take(buf, offset, 4, "parameter count")
    (count,) = struct.unpack("<I", raw)
    params = {}
    for _ in range(count):
        raw, offset = _take(buf, offset, 2, "parameter name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, offset = _take(buf, offset, nlen, "parameter name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"parameter name at offset {offset - nlen} is not UTF-8") from None
        params[name], offset = tensor_from_bytes(buf, offset)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint")
    specs, residual = _layout(config)
    expected = {name: shape for name, shape, _ in specs}
    if set(params) != set(expected):
        raise FormatError(f"checkpoint parameters {sorted(params)} do not match the architecture")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
    ordered = {name: params[name] for name in expected}
    return Model(config, ordered, tuple(residual))


def save_checkpoint(model: Model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(model))
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets

def dataset_to_bytes(data: Dataset) -> bytes:
    return tensor_to_bytes(data.inputs) + tensor_to_bytes(data.labels.astype(np.float64))


def dataset_from_bytes(buf: bytes, split: str = "train") -> Dataset:
    inputs, offset = tensor_from_bytes(buf)
    labels, offset = tensor_from_bytes(buf, offset)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after dataset")
    return dataset_from_arrays(inputs, labels, split)


def dataset_from_arrays(inputs: np.ndarray, labels: np.ndarray, split: str = "train") -> Dataset:
    labels = np.asarray(labels).reshape(-1)
    if np.any(labels != np.round(labels)) or (labels.size and labels.min() < 0):
        raise DataError("labels must be nonnegative integers")
    if inputs.ndim < 2:
        raise DataError(f"inputs must be (n, ...) with n samples, got shape {inputs.shape}")
    data = Dataset(inputs.astype(np.float32), labels.astype(np.int64), split)
    data.check_domain()
    return data


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(data))


def load_dataset(path, split: str = "train") -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes(), split)


def convert_tensors_to_dataset(inputs_path, labels_path, out_path, split: str = "train") -> Dataset:
    """Bundle externally prepared input and label tensor files into one dataset file."""
    data = dataset_from_arrays(load_tensor(inputs_path), load_tensor(labels_path), split)
    save_dataset(data, out_path)
    return data


# ---------------------------------------------------------------------------
# images

def _to_bytes8(img: np.ndarray) -> np.ndarray:
    if img.size and (np.nanmin(img) < 0 or np.nanmax(img) > 1 or np.isnan(img).any()):
        raise ValueError("image values must lie in [0, 1]; clamp before writing")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def image_to_bytes(img, fmt: str = "pgm") -> bytes:
    """Encode a [0, 1] image as binary P5 (``pgm``) or P6 (``ppm``).

    PGM takes (H, W) or (1, H, W); PPM takes (3, H, W) or (H, W, 3).
    """
    img = np.asarray(img, dtype=np.float64)
    if fmt == "pgm":
        if img.ndim == 3 and img.shape[0] == 1:
            img = img[0]
        if img.ndim != 2:
            raise ValueError(f"pgm needs a (H, W) image, got shape {img.shape}")
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + _to_bytes8(img).tobytes()
    if fmt == "ppm":
        if img.ndim == 3 and img.shape[0] == 3 and img.shape[2] != 3:
            img = img.transpose(1, 2, 0)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"ppm needs a (3, H, W) or (H, W, 3) image, got shape {img.shape}")
        h, w, _ = img.shape
        return f"P6\n{w} {h}\n255\n".encode() + _to_bytes8(img).tobytes()
    raise ValueError(f"image format must be 'pgm' or 'ppm', got {fmt!r}")


def write_image(img, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(image_to_bytes(img, fmt))


def image_from_bytes(buf: bytes) -> np.ndarray:
    """Decode P5/P6 with maxval 255 into floats in [0, 1]; (H, W) or (H, W, 3)."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError("truncated image header")
        fields.append(buf[start:pos])
    pos += 1
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"not a binary PGM/PPM: magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("non-numeric image header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError(f"unsupported image header {w}x{h} maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    raw, _ = _take(buf, pos, w * h * channels, "image data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    return image_from_bytes(Path(path).read_bytes())


def image_grid(images, cols: int, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile equally sized (H, W) or (C, H, W) images row-major into one image."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    images = [im[None] if im.ndim == 2 else im for im in images]
    c, h, w = images[0].shape
    rows = -(-len(images) // cols)
    out = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for k, im in enumerate(images):
        r, q = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        out[:, y:y + h, x:x + w] = im
    return out[0] if c == 1 else out


def write_trace(path, values, header=("step", "value")) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, v in enumerate(values):
            writer.writerow([i, repr(float(v))])
