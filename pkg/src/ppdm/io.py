"""Annotation, prediction and tensor file formats.

Writers are canonical: a given value always serializes to the same bytes.
Readers reject anything malformed with a ``FormatError`` naming the offending
location and the violated rule.
"""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .core import Annotations, Box, GridConfig, PPDMError, Triplet

MAGIC = b"PPDM"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBB")
MAX_NDIM = 8


class FormatError(PPDMError):
    def __init__(self, where: str, reason: str):
        super().__init__(f"{where}: {reason}")
        self.where = where
        self.reason = reason


# ---------------------------------------------------------------- tensors


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise ValueError(f"tensor rank {arr.ndim} not in [1, {MAX_NDIM}]")
    data = arr.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor contains non-finite values")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(data).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("byte 0", f"truncated header ({len(buf)} bytes)")
    magic, version, dtype, ndim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("byte 0", f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError("byte 4", f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError("byte 6", f"unsupported dtype code {dtype}")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError("byte 7", f"rank {ndim} not in [1, {MAX_NDIM}]")
    dims_end = _HEADER.size + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError(f"byte {_HEADER.size}", "truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEADER.size)
    expected = math.prod(dims) * 4
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"byte {len(buf)}", f"truncated payload: {payload} of {expected} bytes")
    if payload > expected:
        raise FormatError(f"byte {dims_end + expected}", f"{payload - expected} trailing bytes")
    arr = np.frombuffer(buf, dtype="<f4", offset=dims_end).reshape(dims)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.reshape(-1)))[0])
        raise FormatError(f"byte {dims_end + 4 * bad}", "non-finite value")
    return arr.astype(np.float32)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------- JSON


def _compact(value) -> str:
    return json.dumps(value, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def _dumps(doc: dict) -> bytes:
    """Top-level keys in insertion order, one image per line."""
    parts = []
    for key, value in doc.items():
        if key == "images":
            body = ",\n".join(_compact(img) for img in value)
            parts.append(f'"images":[\n{body}\n]' if value else '"images":[]')
        else:
            parts.append(f"{_compact(key)}:{_compact(value)}")
    return ("{" + ",\n".join(parts) + "}\n").encode("ascii")


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def _loads(buf: bytes):
    try:
        text = buf.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"byte {e.start}", "invalid UTF-8") from None
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as e:
        raise FormatError(f"line {e.lineno} col {e.colno}", e.msg) from None
    except (ValueError, RecursionError) as e:
        raise FormatError("document", str(e)) from None


def _box_doc(box: Box) -> list[float]:
    return [float(v) for v in box.as_list()]


def _triplet_doc(t: Triplet, with_score: bool) -> dict:
    doc = {
        "human_box": _box_doc(t.human),
        "object_box": _box_doc(t.object),
        "object_cat": int(t.object_cat),
        "verb": int(t.verb),
    }
    if with_score:
        doc["score"] = float(t.score)
    return doc


def _images_doc(images: dict[int, list[Triplet]], with_score: bool) -> list:
    return [{"id": int(i), "triplets": [_triplet_doc(t, with_score) for t in ts]} for i, ts in images.items()]


def dump_annotations(ann: Annotations) -> bytes:
    g = ann.grid
    meta = {
        "input_w": g.input_w,
        "input_h": g.input_h,
        "stride": g.stride,
        "num_object_cats": g.num_objects,
        "num_verbs": g.num_verbs,
    }
    return _dumps({"meta": meta, "images": _images_doc(ann.images, False)})


def dump_predictions(images: dict[int, list[Triplet]]) -> bytes:
    return _dumps({"images": _images_doc(images, True)})


def _expect(cond: bool, where: str, reason: str) -> None:
    if not cond:
        raise FormatError(where, reason)


def _int(v, where: str) -> int:
    _expect(isinstance(v, int) and not isinstance(v, bool), where, "expected an integer")
    return v


def _num(v, where: str) -> float:
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool), where, "expected a number")
    _expect(math.isfinite(v), where, "non-finite number")
    return float(v)


def _obj(v, where: str, keys: tuple) -> dict:
    _expect(isinstance(v, dict), where, "expected an object")
    missing = [k for k in keys if k not in v]
    _expect(not missing, where, f"missing keys {missing}")
    extra = sorted(set(v) - set(keys))
    _expect(not extra, where, f"unexpected keys {extra}")
    return v


def _parse_box(v, where: str, strict: bool) -> Box:
    """Ground-truth boxes need positive area; predicted boxes may be degenerate."""
    _expect(isinstance(v, list) and len(v) == 4, where, "box must be a list of 4 numbers")
    x1, y1, x2, y2 = (_num(c, f"{where}[{i}]") for i, c in enumerate(v))
    if strict:
        _expect(x2 > x1 and y2 > y1, where, "box must have x2 > x1 and y2 > y1")
    else:
        _expect(x2 >= x1 and y2 >= y1, where, "box must have x2 >= x1 and y2 >= y1")
    return Box(x1, y1, x2, y2)


_TRIPLET_KEYS = ("human_box", "object_box", "object_cat", "verb")


def _parse_images(doc, where: str, with_score: bool, grid: GridConfig | None) -> dict[int, list[Triplet]]:
    _expect(isinstance(doc, list), where, "expected a list")
    keys = _TRIPLET_KEYS + (("score",) if with_score else ())
    images: dict[int, list[Triplet]] = {}
    for i, img in enumerate(doc):
        w = f"{where}[{i}]"
        img = _obj(img, w, ("id", "triplets"))
        img_id = _int(img["id"], f"{w}.id")
        _expect(img_id not in images, f"{w}.id", f"duplicate image id {img_id}")
        _expect(isinstance(img["triplets"], list), f"{w}.triplets", "expected a list")
        triplets = []
        for j, t in enumerate(img["triplets"]):
            tw = f"{w}.triplets[{j}]"
            t = _obj(t, tw, keys)
            human = _parse_box(t["human_box"], f"{tw}.human_box", not with_score)
            obj = _parse_box(t["object_box"], f"{tw}.object_box", not with_score)
            cat = _int(t["object_cat"], f"{tw}.object_cat")
            verb = _int(t["verb"], f"{tw}.verb")
            _expect(cat >= 0 and (grid is None or cat < grid.num_objects), f"{tw}.object_cat", f"category {cat} out of range")
            _expect(verb >= 0 and (grid is None or verb < grid.num_verbs), f"{tw}.verb", f"verb {verb} out of range")
            score = 1.0
            if with_score:
                score = _num(t["score"], f"{tw}.score")
                _expect(0.0 <= score <= 1.0, f"{tw}.score", "score outside [0, 1]")
            triplets.append(Triplet(human, obj, verb, cat, score))
        images[img_id] = triplets
    return images


def parse_annotations(buf: bytes) -> Annotations:
    doc = _obj(_loads(buf), "$", ("meta", "images"))
    meta = _obj(doc["meta"], "$.meta", ("input_w", "input_h", "stride", "num_object_cats", "num_verbs"))
    vals = {k: _int(meta[k], f"$.meta.{k}") for k in meta}
    try:
        grid = GridConfig(vals["input_w"], vals["input_h"], vals["stride"], vals["num_object_cats"], vals["num_verbs"])
    except ValueError as e:
        raise FormatError("$.meta", str(e)) from None
    return Annotations(grid, _parse_images(doc["images"], "$.images", False, grid))


def parse_predictions(buf: bytes, grid: GridConfig | None = None) -> dict[int, list[Triplet]]:
    doc = _obj(_loads(buf), "$", ("images",))
    return _parse_images(doc["images"], "$.images", True, grid)


def read_annotations(path) -> Annotations:
    return parse_annotations(Path(path).read_bytes())


def write_annotations(path, ann: Annotations) -> None:
    Path(path).write_bytes(dump_annotations(ann))


def read_predictions(path, grid: GridConfig | None = None) -> dict[int, list[Triplet]]:
    return parse_predictions(Path(path).read_bytes(), grid)


def write_predictions(path, images: dict[int, list[Triplet]]) -> None:
    Path(path).write_bytes(dump_predictions(images))
