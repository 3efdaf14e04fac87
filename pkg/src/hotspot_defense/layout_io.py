"""GDSII stream subset (one structure of layer-1 boundaries) and the dataset manifest.

Records written, in order: HEADER, BGNLIB, LIBNAME, UNITS, BGNSTR, STRNAME,
then BOUNDARY / LAYER / DATATYPE / XY / ENDEL per polygon, ENDSTR, ENDLIB.
One database unit is one nanometre. Timestamps are zero so output is a pure
function of the clip.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .geometry import GeometryError, LayoutClip, RectilinearPolygon
from .litho import Label

# record type/data type pairs
HEADER = 0x0002
BGNLIB = 0x0102
LIBNAME = 0x0206
UNITS = 0x0305
ENDLIB = 0x0400
BGNSTR = 0x0502
STRNAME = 0x0606
ENDSTR = 0x0700
BOUNDARY = 0x0800
PATH = 0x0900
SREF = 0x0A00
AREF = 0x0B00
TEXT = 0x0C00
LAYER = 0x0D02
DATATYPE = 0x0E02
XY = 0x1003
ENDEL = 0x1100
NODE = 0x1500
BOX = 0x2D00

_OTHER_ELEMENTS = {PATH, SREF, AREF, TEXT, NODE, BOX}
GDS_VERSION = 600
LAYER_NUMBER = 1
DB_UNIT_M = 1e-9
USER_UNIT_PER_DB = 1e-3


class GdsParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    pass


# -- excess-64 base-16 reals --------------------------------------------------

def encode_real8(value: float) -> bytes:
    """IBM-370 style 8-byte real: sign, 7-bit excess-64 hex exponent, 56-bit mantissa."""
    if value == 0:
        return bytes(8)
    sign = 0x80 if value < 0 else 0
    v = abs(value)
    exp = 0
    while v >= 1:
        v /= 16
        exp += 1
    while v < 1 / 16:
        v *= 16
        exp -= 1
    mant = int(round(v * (1 << 56)))
    if mant >= 1 << 56:  # rounding spilled into the next hex digit
        mant >>= 4
        exp += 1
    if not -64 <= exp < 64:
        raise ValueError(f"{value!r} out of GDSII real range")
    return bytes([sign | (exp + 64)]) + mant.to_bytes(7, "big")


def decode_real8(data: bytes) -> float:
    if len(data) != 8:
        raise ValueError("8-byte real expected")
    exp = (data[0] & 0x7F) - 64
    mant = int.from_bytes(data[1:], "big")
    v = mant / (1 << 56) * 16.0 ** exp
    return -v if data[0] & 0x80 else v


# -- writer --------------------------------------------------------------------

@dataclass(frozen=True)
class GdsRecord:
    record_type: int
    data_type: int
    payload: bytes = b""

    @property
    def length(self) -> int:
        return 4 + len(self.payload)

    @property
    def tag(self) -> int:
        return (self.record_type << 8) | self.data_type

    def encode(self) -> bytes:
        if self.length % 2 or self.length > 0xFFFF:
            raise ValueError("record length must be even and fit in 16 bits")
        return struct.pack(">HBB", self.length, self.record_type, self.data_type) + self.payload


def _rec(tag: int, payload: bytes = b"") -> bytes:
    return GdsRecord(tag >> 8, tag & 0xFF, payload).encode()


def _ascii(s: str) -> bytes:
    b = s.encode("ascii")
    return b + b"\0" if len(b) % 2 else b


def _int16s(*vals: int) -> bytes:
    return struct.pack(f">{len(vals)}h", *vals)


def clip_gds_bytes(clip: LayoutClip, libname: str = "HSLIB") -> bytes:
    out = [
        _rec(HEADER, _int16s(GDS_VERSION)),
        _rec(BGNLIB, _int16s(*[0] * 12)),
        _rec(LIBNAME, _ascii(libname)),
        _rec(UNITS, encode_real8(USER_UNIT_PER_DB) + encode_real8(DB_UNIT_M)),
        _rec(BGNSTR, _int16s(*[0] * 12)),
        _rec(STRNAME, _ascii(clip.id)),
    ]
    for poly in clip.polygons:
        loop = poly.closed_loop()
        xy = struct.pack(f">{2 * len(loop)}i", *(c for p in loop for c in p))
        out += [_rec(BOUNDARY), _rec(LAYER, _int16s(LAYER_NUMBER)),
                _rec(DATATYPE, _int16s(0)), _rec(XY, xy), _rec(ENDEL)]
    out += [_rec(ENDSTR), _rec(ENDLIB)]
    return b"".join(out)


def write_clip_gds(clip: LayoutClip, path: Union[str, Path]) -> int:
    data = clip_gds_bytes(clip)
    Path(path).write_bytes(data)
    return len(data)


# -- reader --------------------------------------------------------------------

def iter_records(data: bytes) -> Iterable[tuple[int, GdsRecord]]:
    """Yield (offset, record); raises GdsParseError on framing faults."""
    off = 0
    n = len(data)
    while off < n:
        if n - off < 4:
            raise GdsParseError("truncated record header", off)
        length, rtype, dtype = struct.unpack_from(">HBB", data, off)
        if length < 4:
            raise GdsParseError(f"record length {length} below 4", off)
        if length % 2:
            raise GdsParseError(f"odd record length {length}", off)
        if off + length > n:
            raise GdsParseError("truncated record", off)
        yield off, GdsRecord(rtype, dtype, bytes(data[off + 4:off + length]))
        off += length
        if rtype << 8 | dtype == ENDLIB:
            return


def _polygon_from_xy(payload: bytes, off: int) -> RectilinearPolygon:
    if len(payload) % 8:
        raise GdsParseError("XY payload is not a whole number of points", off)
    vals = struct.unpack(f">{len(payload) // 4}i", payload)
    pts = list(zip(vals[0::2], vals[1::2]))
    if len(pts) < 2 or pts[0] != pts[-1]:
        raise GdsParseError("XY loop not closed", off)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 != x1 and y0 != y1:
            raise GdsParseError("non-rectilinear XY segment", off)
    try:
        return RectilinearPolygon.from_points(pts)
    except GeometryError as exc:
        raise GdsParseError(f"invalid boundary: {exc}", off) from exc


def parse_clip_gds(data: bytes, clip_id: str | None = None) -> LayoutClip:
    name = None
    polys: list[RectilinearPolygon] = []
    warnings: list[str] = []
    in_boundary = skipping = False
    layer = None
    xy = None
    saw_endlib = False
    for off, rec in iter_records(data):
        tag = rec.tag
        if skipping:
            if tag == ENDEL:
                skipping = False
            continue
        if tag == BOUNDARY:
            in_boundary, layer, xy = True, None, None
        elif tag in _OTHER_ELEMENTS:
            warnings.append(f"skipped element 0x{tag:04x} at {off}")
            skipping = True
        elif tag == LAYER and in_boundary:
            layer = struct.unpack(">h", rec.payload[:2])[0]
        elif tag == XY and in_boundary:
            xy = _polygon_from_xy(rec.payload, off)
        elif tag == ENDEL and in_boundary:
            if xy is None:
                raise GdsParseError("BOUNDARY without XY", off)
            if layer == LAYER_NUMBER:
                polys.append(xy)
            else:
                warnings.append(f"skipped boundary on layer {layer} at {off}")
            in_boundary = False
        elif tag == STRNAME:
            name = rec.payload.rstrip(b"\0").decode("ascii", errors="replace")
        elif tag == UNITS:
            db = decode_real8(rec.payload[8:16]) if len(rec.payload) >= 16 else None
            if db is None or not math.isclose(db, DB_UNIT_M, rel_tol=1e-9):
                warnings.append(f"database unit {db!r} m is not 1 nm")
        elif tag == ENDLIB:
            saw_endlib = True
        elif tag in (HEADER, BGNLIB, LIBNAME, BGNSTR, ENDSTR, DATATYPE):
            pass
        else:
            warnings.append(f"skipped record 0x{tag:04x} at {off}")
    if not saw_endlib:
        raise GdsParseError("missing ENDLIB", len(data))
    return LayoutClip(clip_id or name or "clip", tuple(polys), warnings=tuple(warnings))


def read_clip_gds(path: Union[str, Path]) -> LayoutClip:
    return parse_clip_gds(Path(path).read_bytes())


# -- manifest ------------------------------------------------------------------

class Split(enum.Enum):
    TRAIN = "Train"
    TEST = "Test"


@dataclass(frozen=True)
class Original:
    kind = "Original"

    def as_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class VariantOf:
    parent_id: str
    variant_index: int
    kind = "VariantOf"

    def as_dict(self) -> dict:
        return {"kind": self.kind, "parent_id": self.parent_id, "variant_index": self.variant_index}


@dataclass(frozen=True)
class Poisoned:
    parent_id: str
    trigger_id: str
    kind = "Poisoned"

    def as_dict(self) -> dict:
        return {"kind": self.kind, "parent_id": self.parent_id, "trigger_id": self.trigger_id}


Provenance = Union[Original, VariantOf, Poisoned]


def provenance_from_dict(d: dict) -> Provenance:
    kind = d.get("kind")
    if kind == "Original":
        return Original()
    if kind == "VariantOf":
        return VariantOf(str(d["parent_id"]), int(d["variant_index"]))
    if kind == "Poisoned":
        return Poisoned(str(d["parent_id"]), str(d["trigger_id"]))
    raise ManifestError(f"unknown provenance kind {kind!r}")


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    path: str
    label: Label | None
    split: Split
    provenance: Provenance = Original()
    rng_seed: int = 0

    def as_dict(self) -> dict:
        return {
            "id": self.clip_id,
            "path": self.path,
            "label": None if self.label is None else self.label.value,
            "split": self.split.value,
            "provenance": self.provenance.as_dict(),
            "seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClipRecord:
        label = d.get("label")
        return cls(str(d["id"]), str(d["path"]), None if label is None else Label(label),
                   Split(d["split"]), provenance_from_dict(d["provenance"]), int(d["seed"]))


FORMAT_VERSION = 1


@dataclass
class DatasetManifest:
    global_seed: int = 0
    config_digest: str = ""
    records: list[ClipRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def counts(self) -> dict[str, int]:
        c = Counter(
            f"{r.split.value}/{'Unlabeled' if r.label is None else r.label.value}/{r.provenance.kind}"
            for r in self.records)
        return dict(sorted(c.items()))

    def by_id(self) -> dict[str, ClipRecord]:
        return {r.clip_id: r for r in self.records}

    def validate(self) -> None:
        seen: set[str] = set()
        for r in self.records:
            if r.clip_id in seen:
                raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
            seen.add(r.clip_id)
        parent = {r.clip_id: getattr(r.provenance, "parent_id", None) for r in self.records}
        for start in parent:
            hops, cur = 0, parent[start]
            while cur is not None and cur in parent:
                if cur == start or hops > len(parent):
                    raise ManifestError(f"provenance cycle through {start!r}")
                cur = parent[cur]
                hops += 1


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def manifest_text(manifest: DatasetManifest) -> str:
    manifest.validate()
    lines = [_dumps({"kind": "header", "format_version": manifest.format_version,
                     "global_seed": manifest.global_seed,
                     "config_digest": manifest.config_digest})]
    lines += [_dumps({"kind": "record", **r.as_dict()}) for r in manifest.records]
    lines.append(_dumps({"kind": "footer", "total": len(manifest.records),
                         "counts": manifest.counts()}))
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    Path(path).write_text(manifest_text(manifest), encoding="utf-8")


def parse_manifest(text: str) -> DatasetManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ManifestError("manifest needs a header and a footer line")
    try:
        rows = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest line: {exc}") from exc
    head, foot = rows[0], rows[-1]
    if head.get("kind") != "header" or foot.get("kind") != "footer":
        raise ManifestError("first line must be the header and last line the footer")
    if head.get("format_version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported format version {head.get('format_version')!r}")
    records = []
    for row in rows[1:-1]:
        if row.get("kind") != "record":
            raise ManifestError(f"unexpected line kind {row.get('kind')!r}")
        records.append(ClipRecord.from_dict(row))
    m = DatasetManifest(int(head["global_seed"]), str(head["config_digest"]), records)
    m.validate()
    if foot.get("total") != len(records) or foot.get("counts") != m.counts():
        raise ManifestError("footer counts disagree with records")
    return m


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Sample:
    """A manifest record together with its in-memory geometry."""

    record: ClipRecord
    clip: LayoutClip

    @property
    def label(self) -> Label | None:
        return self.record.label

    @property
    def clip_id(self) -> str:
        return self.record.clip_id


def clip_path(clip_id: str) -> str:
    return f"clips/{clip_id}.gds"
