"""File formats: SQC1 concentration maps, SQCK checkpoints, stain-matrix text,
RGB rasters."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from PIL import Image

from .stains import ConcentrationMap, StainMatrix, check_rgb

SQC1_MAGIC = b"SQC1"
SQCK_MAGIC = b"SQCK"
SQCK_VERSION = 1
STAIN_FILE_VERSION = 1


class FormatError(ValueError):
    pass


# ------------------------------------------------------------- stain matrix

def stain_matrix_to_text(S: StainMatrix, normalized: bool = False) -> str:
    doc = {
        "version": STAIN_FILE_VERSION,
        "K": S.K,
        "names": list(S.names),
        "columns": [[float(v) for v in S.columns[:, k]] for k in range(S.K)],
        "normalized": bool(normalized),
    }
    return json.dumps(doc, indent=2) + "\n"


def stain_matrix_from_text(text: str) -> tuple[StainMatrix, bool]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"stain matrix file is not valid JSON: {exc}") from None
    missing = {"version", "K", "names", "columns"} - set(doc)
    if missing:
        raise FormatError(f"stain matrix file missing fields {sorted(missing)}")
    if doc["version"] != STAIN_FILE_VERSION:
        raise FormatError(f"unsupported stain matrix version {doc['version']}")
    cols = np.asarray(doc["columns"], dtype=np.float64)
    if cols.shape != (doc["K"], 3) or len(doc["names"]) != doc["K"]:
        raise FormatError(f"stain matrix file declares K={doc['K']} but holds {cols.shape}")
    return StainMatrix(cols.T, tuple(doc["names"])), bool(doc.get("normalized", False))


def write_stain_matrix(path, S: StainMatrix, normalized: bool = False) -> None:
    Path(path).write_text(stain_matrix_to_text(S, normalized))


def read_stain_matrix(path) -> StainMatrix:
    return stain_matrix_from_text(Path(path).read_text())[0]


# --------------------------------------------------------------------- SQC1

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if pos + n > len(buf):
        raise FormatError("truncated string")
    return buf[pos:pos + n].decode("utf-8"), pos + n


def concentrations_to_bytes(C: ConcentrationMap) -> bytes:
    h, w, k = C.values.shape
    body = np.ascontiguousarray(C.values, dtype="<f4").tobytes()
    return (SQC1_MAGIC + struct.pack("<III", h, w, k) + body
            + b"".join(_pack_str(n) for n in C.names))


def concentrations_from_bytes(buf: bytes) -> ConcentrationMap:
    if buf[:4] != SQC1_MAGIC:
        raise FormatError("not an SQC1 file (bad magic)")
    h, w, k = struct.unpack_from("<III", buf, 4)
    pos = 16
    n = h * w * k
    if pos + 4 * n > len(buf):
        raise FormatError("truncated SQC1 payload")
    values = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(h, w, k)
    pos += 4 * n
    names = []
    for _ in range(k):
        name, pos = _unpack_str(buf, pos)
        names.append(name)
    return ConcentrationMap(values.astype(np.float32), tuple(names))


def write_concentrations(path, C: ConcentrationMap) -> None:
    Path(path).write_bytes(concentrations_to_bytes(C))


def read_concentrations(path) -> ConcentrationMap:
    return concentrations_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------- SQCK

@dataclass
class Checkpoint:
    """Everything needed to resume or apply a trained model.

    ``stain_params`` are the unconstrained entries ``u`` with
    ``S = normalize_columns(softplus(u))``.
    """

    config: dict
    params: Dict[str, np.ndarray]
    stain_params: np.ndarray
    stain_names: tuple
    step: int = 0
    optimizer: Optional[Dict[str, np.ndarray]] = None
    extra: dict = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return (_pack_str(name) + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def _unpack_tensor(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    name, pos = _unpack_str(buf, pos)
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if pos + 4 * n > len(buf):
        raise FormatError(f"truncated tensor {name!r}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
    return name, arr, pos + 4 * n


def tensors_to_bytes(tensors: Dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(tensors)) + b"".join(
        _pack_tensor(k, v) for k, v in tensors.items())


def tensors_from_bytes(buf: bytes, pos: int = 0) -> tuple[Dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        name, arr, pos = _unpack_tensor(buf, pos)
        out[name] = arr
    return out, pos


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    header = json.dumps({"encoder": ck.config, "stain_names": list(ck.stain_names),
                         "extra": ck.extra}, sort_keys=True)
    parts = [SQCK_MAGIC, struct.pack("<I", SQCK_VERSION), _pack_str(header),
             struct.pack("<Q", ck.step), tensors_to_bytes(ck.params),
             _pack_tensor("stain.u", ck.stain_params)]
    if ck.optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts += [struct.pack("<B", 1), tensors_to_bytes(ck.optimizer)]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != SQCK_MAGIC:
        raise FormatError("not an SQCK checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != SQCK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header, pos = _unpack_str(buf, 8)
    meta = json.loads(header)
    (step,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    params, pos = tensors_from_bytes(buf, pos)
    _, stain_u, pos = _unpack_tensor(buf, pos)
    (has_opt,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    optimizer = None
    if has_opt:
        optimizer, pos = tensors_from_bytes(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return Checkpoint(meta["encoder"], params, stain_u, tuple(meta["stain_names"]),
                      int(step), optimizer, meta.get("extra", {}))


def write_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ck))


def read_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ rasters

def read_image(path) -> np.ndarray:
    """RGB raster as float H x W x 3 in [0, 1].

    ``.npy`` files hold lossless float images; anything else is decoded by Pillow.
    """
    if Path(path).suffix.lower() == ".npy":
        return check_rgb(np.load(path, allow_pickle=False))
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, float) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, rgb: np.ndarray) -> None:
    """8-bit PNG, or a lossless float array when ``path`` ends in ``.npy``."""
    if Path(path).suffix.lower() == ".npy":
        with open(path, "wb") as fh:
            np.save(fh, check_rgb(rgb), allow_pickle=False)
        return
    Image.fromarray(to_uint8(rgb)).save(path, format="PNG")
