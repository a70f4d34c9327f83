"""File formats and dataset plumbing.

Formats, all documented bit-exactly in the README:
  - PLY point clouds, ASCII and binary little-endian, float64 coordinates,
    optional uchar red/green/blue and int32 label properties
  - whitespace "x y z r g b" text (colors 0..255)
  - sidecar text files, one integer per line, for labels and superpoints
  - flat "key = value" config and metrics-report text
  - line-delimited JSON training logs
  - versioned binary checkpoints (JSON header + raw little-endian blobs)

Writers are deterministic: same inputs produce byte-identical files, which
the determinism acceptance check relies on.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .superpoints import Partition


class ParseError(ValueError):
    """Malformed input file; message carries file and position context."""


# ---------------------------------------------------------------------------
# PLY

_PLY_DTYPES = {
    "double": "<f8", "float64": "<f8",
    "float": "<f4", "float32": "<f4",
    "uchar": "u1", "uint8": "u1",
    "int": "<i4", "int32": "<i4",
}


_AUTO = object()


def write_ply(path: str, cloud: PointCloud, binary: bool = True,
              labels=_AUTO) -> None:
    """Write a cloud as PLY; colors are included when present.

    labels defaults to cloud.gt_labels; pass an array to override or None
    to omit the label property.  ASCII coordinates use repr formatting, so
    an ASCII roundtrip reproduces float64 bit-exactly.
    """
    if labels is _AUTO:
        labels = cloud.gt_labels
    n = len(cloud.positions)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}",
              "property double x", "property double y", "property double z"]
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    if labels is not None:
        header += ["property int label"]
    header += ["end_header"]
    rgb = None
    if cloud.colors is not None:
        rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if rgb is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if labels is not None:
                fields += [("label", "<i4")]
            rows = np.empty(n, dtype=np.dtype(fields))
            rows["x"], rows["y"], rows["z"] = cloud.positions.T
            if rgb is not None:
                rows["red"], rows["green"], rows["blue"] = rgb.T
            if labels is not None:
                rows["label"] = labels.astype(np.int32)
            fh.write(rows.tobytes())
        else:
            lines = []
            for i in range(n):
                parts = [repr(float(v)) for v in cloud.positions[i]]
                if rgb is not None:
                    parts += [str(int(v)) for v in rgb[i]]
                if labels is not None:
                    parts.append(str(int(labels[i])))
                lines.append(" ".join(parts))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_ply_header(raw: bytes, path: str):
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: missing end_header")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise ParseError(f"{path}: truncated header")
    body_start = nl + 1
    lines = raw[:end].decode("ascii", "replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: line 1: not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: line {ln}: unsupported format")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) < 3:
                raise ParseError(f"{path}: line {ln}: malformed element")
            if tok[1] == "vertex":
                in_vertex = True
                count = int(tok[2])
            else:
                raise ParseError(
                    f"{path}: line {ln}: unsupported element '{tok[1]}'")
        elif tok[0] == "property":
            if not in_vertex:
                raise ParseError(
                    f"{path}: line {ln}: property outside vertex element")
            if len(tok) != 3 or tok[1] not in _PLY_DTYPES:
                raise ParseError(
                    f"{path}: line {ln}: unsupported property type "
                    f"'{' '.join(tok[1:])}'")
            props.append((tok[2], _PLY_DTYPES[tok[1]]))
    if fmt is None:
        raise ParseError(f"{path}: missing format line")
    if count is None:
        raise ParseError(f"{path}: missing vertex element")
    for axis in ("x", "y", "z"):
        if axis not in [p[0] for p in props]:
            raise ParseError(f"{path}: missing property '{axis}'")
    return fmt, count, props, body_start


def read_ply(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    fmt, count, props, body_start = _parse_ply_header(raw, path)
    names = [p[0] for p in props]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, t) for n, t in props])
        need = dtype.itemsize * count
        body = raw[body_start:body_start + need]
        if len(body) < need:
            raise ParseError(
                f"{path}: truncated body at byte {body_start + len(body)}: "
                f"expected {need} bytes of vertex data")
        rows = np.frombuffer(body, dtype=dtype)
    else:
        text = raw[body_start:].decode("ascii", "replace")
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) < count:
            raise ParseError(
                f"{path}: truncated body: {len(lines)} rows, expected {count}")
        cols: dict[str, list] = {n: [] for n in names}
        header_lines = raw[:body_start].count(b"\n")
        for ln, line in enumerate(lines[:count], start=header_lines + 1):
            tok = line.split()
            if len(tok) != len(props):
                raise ParseError(
                    f"{path}: line {ln}: expected {len(props)} values, "
                    f"got {len(tok)}")
            for (name, typ), t in zip(props, tok):
                try:
                    cols[name].append(float(t) if typ.endswith("f8") or
                                      typ.endswith("f4") else int(t))
                except ValueError as exc:
                    raise ParseError(
                        f"{path}: line {ln}: bad value '{t}'") from exc
        rows = {n: np.asarray(cols[n]) for n in names}
    positions = np.stack(
        [np.asarray(rows["x"], dtype=np.float64),
         np.asarray(rows["y"], dtype=np.float64),
         np.asarray(rows["z"], dtype=np.float64)], axis=1)
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack(
            [np.asarray(rows[c], dtype=np.float64) / 255.0
             for c in ("red", "green", "blue")], axis=1)
    labels = None
    if "label" in names:
        labels = np.asarray(rows["label"], dtype=np.int64)
    return PointCloud(positions=positions, colors=colors, gt_labels=labels,
                      id=os.path.splitext(os.path.basename(path))[0])


# ---------------------------------------------------------------------------
# xyzrgb text

def read_xyzrgb_txt(path: str) -> PointCloud:
    """Whitespace 'x y z r g b' lines; colors are 0..255 and divided down."""
    pts, cols = [], []
    n_lines = 0
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            n_lines += 1
            tok = line.split()
            if len(tok) != 6:
                raise ParseError(f"{path}: line {ln}: expected 6 values, "
                                 f"got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError as exc:
                raise ParseError(f"{path}: line {ln}: non-numeric token") from exc
            pts.append(vals[:3])
            cols.append(vals[3:])
    if n_lines == 0:
        raise ParseError(f"{path}: empty file")
    return PointCloud(positions=np.asarray(pts, dtype=np.float64),
                      colors=np.asarray(cols, dtype=np.float64) / 255.0,
                      id=os.path.splitext(os.path.basename(path))[0])


# ---------------------------------------------------------------------------
# integer sidecars

def write_int_lines(path: str, values: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(("\n".join(str(int(v)) for v in values) + "\n").encode("ascii"))


def read_int_lines(path: str) -> np.ndarray:
    with open(path) as fh:
        out = []
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(int(line))
            except ValueError as exc:
                raise ParseError(f"{path}: line {ln}: not an integer") from exc
    return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# flat key = value files

def parse_kv(path: str) -> dict:
    """Flat 'key = value' text; '#' starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParseError(f"{path}: line {ln}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError(f"{path}: line {ln}: empty key")
            if key in out:
                raise ParseError(f"{path}: line {ln}: duplicate key '{key}'")
            out[key] = value.strip()
    return out


def coerce_kv(raw: dict, fields: dict) -> dict:
    """Convert raw string values to the types in fields; unknown keys error."""
    out = {}
    for key, value in raw.items():
        if key not in fields:
            raise ParseError(f"unknown config key '{key}'")
        typ = fields[key]
        try:
            if typ is bool:
                low = value.lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                out[key] = low in ("true", "1")
            else:
                out[key] = typ(value)
        except ValueError as exc:
            raise ParseError(
                f"config key '{key}': cannot parse '{value}' as "
                f"{typ.__name__}") from exc
    return out


def format_report(entries: dict) -> str:
    lines = []
    for key, value in entries.items():
        if isinstance(value, float):
            lines.append(f"{key} = {value!r}")
        else:
            lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_report(path: str, entries: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(format_report(entries).encode("ascii"))


# ---------------------------------------------------------------------------
# training log

def append_log(path: str, record: dict) -> None:
    with open(path, "ab") as fh:
        fh.write((json.dumps(record, sort_keys=True) + "\n").encode("ascii"))


def read_log(path: str) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"GSEGCKPT"
_CKPT_DTYPES = {"<f8": "<f8", "<i8": "<i8"}


def write_checkpoint(path: str, arrays: dict, meta: dict | None = None) -> None:
    """Versioned binary tensor archive.

    Layout: 8-byte magic, uint32 version, uint64 header length, JSON header
    (sorted keys, no whitespace) describing array names/shapes/dtypes and
    carrying meta, then each array's raw little-endian bytes in header
    order.  Contains no timestamps, so identical inputs give identical
    bytes.
    """
    names = sorted(arrays)
    descr = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8", copy=False)
        else:
            raise ValueError(f"checkpoint array '{name}': unsupported dtype")
        descr.append({"dtype": arr.dtype.str, "name": name,
                      "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"arrays": descr, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != 1:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack("<Q", raw[12:20])[0]
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    offset = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        need = dtype.itemsize * count
        if offset + need > len(raw):
            raise ParseError(f"{path}: truncated at byte {offset}")
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:offset + need], dtype=dtype).reshape(entry["shape"]).copy()
        offset += need
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# scene records

LABELS_SUFFIX = ".labels.txt"
SUPERPOINTS_SUFFIX = ".superpoints.txt"
MANIFEST_NAME = "scenes.txt"


@dataclass(frozen=True)
class SceneRecord:
    """A stored scene: cloud file plus optional sidecars and a split tag."""

    cloud_path: str
    label_path: str | None = None
    partition_path: str | None = None
    split: str = "train"

    @property
    def name(self) -> str:
        return os.path.splitext(os.path.basename(self.cloud_path))[0]


def scene_record(cloud_path: str, split: str = "train") -> SceneRecord:
    """Build a record, picking up sidecars that exist next to the cloud."""
    stem = os.path.splitext(cloud_path)[0]
    label_path = stem + LABELS_SUFFIX
    partition_path = stem + SUPERPOINTS_SUFFIX
    return SceneRecord(
        cloud_path=cloud_path,
        label_path=label_path if os.path.exists(label_path) else None,
        partition_path=partition_path if os.path.exists(partition_path) else None,
        split=split)


def load_scene(record: SceneRecord) -> tuple[PointCloud, Partition | None]:
    """Read a record's cloud and sidecars; lengths must agree."""
    cloud = read_ply(record.cloud_path)
    n = len(cloud.positions)
    if record.label_path is not None:
        labels = read_int_lines(record.label_path)
        if len(labels) != n:
            raise ParseError(
                f"{record.label_path}: {len(labels)} labels for {n} points")
        cloud = PointCloud(positions=cloud.positions, colors=cloud.colors,
                           gt_labels=labels, id=cloud.id)
    partition = None
    if record.partition_path is not None:
        assign = read_int_lines(record.partition_path)
        if len(assign) != n:
            raise ParseError(
                f"{record.partition_path}: {len(assign)} rows for {n} points")
        count = int(assign.max()) + 1 if (assign >= 0).any() else 0
        partition = Partition(assignment=assign, count=count)
    return cloud, partition


def write_manifest(directory: str, records: list) -> None:
    path = os.path.join(directory, MANIFEST_NAME)
    lines = [f"{os.path.basename(r.cloud_path)} {r.split}" for r in records]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_manifest(directory: str) -> list:
    """Records listed in scenes.txt, or every .ply in the directory."""
    path = os.path.join(directory, MANIFEST_NAME)
    records = []
    if os.path.exists(path):
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                tok = line.split()
                if len(tok) != 2 or tok[1] not in ("train", "test"):
                    raise ParseError(
                        f"{path}: line {ln}: expected '<file> train|test'")
                records.append(
                    scene_record(os.path.join(directory, tok[0]), tok[1]))
    else:
        for name in sorted(os.listdir(directory)):
            if name.endswith(".ply"):
                records.append(
                    scene_record(os.path.join(directory, name), "train"))
    if not records:
        raise ParseError(f"{directory}: no scenes found")
    for rec in records:
        if not os.path.exists(rec.cloud_path):
            raise ParseError(f"{rec.cloud_path}: listed scene file missing")
    return records
