import struct

import pytest
from hypothesis import given, settings, strategies as st

from hotspot_defense.geometry import LayoutClip, RectilinearPolygon
from hotspot_defense.layout_io import (
    BOUNDARY,
    ClipRecord,
    DatasetManifest,
    GdsParseError,
    GdsRecord,
    ManifestError,
    Original,
    Poisoned,
    Split,
    VariantOf,
    clip_gds_bytes,
    decode_real8,
    encode_real8,
    iter_records,
    load_manifest,
    manifest_text,
    parse_clip_gds,
    parse_manifest,
    read_clip_gds,
    save_manifest,
    write_clip_gds,
)
from hotspot_defense.litho import Label
from hotspot_defense.seeding import rng_for
from hotspot_defense.synthesis import CorpusParams, generate_clip

R = RectilinearPolygon.from_rect


def _clip():
    l_shape = RectilinearPolygon.from_points([(0, 0), (210, 0), (210, 70), (70, 70), (70, 210), (0, 210)])
    return LayoutClip("c1", (R(300, 300, 600, 370), l_shape.translated(700, 700)))


def test_boundary_header_bytes():
    data = clip_gds_bytes(_clip())
    assert bytes.fromhex("00040800") in data
    assert GdsRecord(BOUNDARY >> 8, BOUNDARY & 0xFF).encode() == bytes.fromhex("00040800")


def test_record_sequence():
    tags = [r.tag for _, r in iter_records(clip_gds_bytes(_clip()))]
    head = [0x0002, 0x0102, 0x0206, 0x0305, 0x0502, 0x0606]
    element = [0x0800, 0x0D02, 0x0E02, 0x1003, 0x1100]
    assert tags == head + element * 2 + [0x0700, 0x0400]


def test_units_are_nanometres():
    recs = dict((r.tag, r) for _, r in iter_records(clip_gds_bytes(_clip())))
    units = recs[0x0305].payload
    assert decode_real8(units[:8]) == pytest.approx(1e-3, rel=1e-12)
    assert decode_real8(units[8:]) == pytest.approx(1e-9, rel=1e-12)


def test_big_endian_xy():
    data = clip_gds_bytes(LayoutClip("x", (R(5, 10, 15, 20),)))
    xy = [r for _, r in iter_records(data) if r.tag == 0x1003][0]
    assert xy.payload[:8] == struct.pack(">ii", 5, 10)
    assert len(xy.payload) == 5 * 8  # closed loop repeats the first point


def test_empty_clip_round_trip(tmp_path):
    p = tmp_path / "e.gds"
    write_clip_gds(LayoutClip("empty"), p)
    back = read_clip_gds(p)
    assert back.polygons == () and back.id == "empty"


def test_round_trip_byte_identical(tmp_path):
    c = _clip()
    p = tmp_path / "c.gds"
    write_clip_gds(c, p)
    back = read_clip_gds(p)
    assert back.polygons == c.polygons
    assert clip_gds_bytes(back) == p.read_bytes()


def test_truncated_file_names_offset():
    data = clip_gds_bytes(_clip())
    with pytest.raises(GdsParseError) as err:
        parse_clip_gds(data[:50])
    assert err.value.offset > 0 and "offset" in str(err.value)


def test_odd_length_record():
    with pytest.raises(GdsParseError, match="odd"):
        list(iter_records(bytes.fromhex("00050800aa")))


def _with_xy(points):
    data = clip_gds_bytes(LayoutClip("x", (R(0, 0, 10, 10),)))
    recs = [(off, r) for off, r in iter_records(data)]
    out = b""
    for _, r in recs:
        if r.tag == 0x1003:
            r = GdsRecord(0x10, 0x03, struct.pack(f">{2 * len(points)}i", *(c for p in points for c in p)))
        out += r.encode()
    return out


def test_diagonal_xy_rejected():
    with pytest.raises(GdsParseError, match="non-rectilinear"):
        parse_clip_gds(_with_xy([(0, 0), (10, 0), (20, 10), (0, 10), (0, 0)]))


def test_open_loop_rejected():
    with pytest.raises(GdsParseError, match="not closed"):
        parse_clip_gds(_with_xy([(0, 0), (10, 0), (10, 10), (0, 10)]))


def test_unknown_records_skipped_with_warning():
    data = clip_gds_bytes(_clip())
    # a TEXT element and a stray PROPATTR record, inserted before ENDSTR
    extra = (GdsRecord(0x0C, 0x00).encode() + GdsRecord(0x0D, 0x02, struct.pack(">h", 1)).encode()
             + GdsRecord(0x11, 0x00).encode() + GdsRecord(0x2B, 0x02, struct.pack(">h", 7)).encode())
    cut = data.rindex(bytes.fromhex("00040700"))
    clip = parse_clip_gds(data[:cut] + extra + data[cut:])
    assert clip.polygons == _clip().polygons
    assert len(clip.warnings) == 2


def test_real8_known_value():
    # rounded mantissa; writers that truncate emit ...a7ef instead
    assert encode_real8(1e-3) == bytes.fromhex("3e4189374bc6a7f0")
    assert decode_real8(bytes.fromhex("4110000000000000")) == 1.0


@given(st.floats(min_value=1e-12, max_value=1e12))
def test_real8_round_trip(v):
    assert decode_real8(encode_real8(v)) == pytest.approx(v, rel=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_generated_clips_round_trip(seed):
    clip = generate_clip("g", rng_for(seed), CorpusParams())
    data = clip_gds_bytes(clip)
    back = parse_clip_gds(data)
    assert back.polygons == clip.polygons
    assert clip_gds_bytes(back) == data


# -- manifests ---------------------------------------------------------------------

def _records():
    return [
        ClipRecord("a", "clips/a.gds", Label.HOTSPOT, Split.TRAIN, Original(), 1),
        ClipRecord("b", "clips/b.gds", Label.NON_HOTSPOT, Split.TEST, Original(), 2),
        ClipRecord("a_v0001", "clips/a_v0001.gds", Label.HOTSPOT, Split.TRAIN, VariantOf("a", 1), 3),
        ClipRecord("b_pT0", "clips/b_pT0.gds", Label.NON_HOTSPOT, Split.TEST, Poisoned("b", "T0"), 2),
    ]


def test_empty_manifest_round_trip(tmp_path):
    p = tmp_path / "m.jsonl"
    save_manifest(DatasetManifest(), p)
    m = load_manifest(p)
    assert m.records == [] and m.counts() == {}


def test_manifest_round_trip_and_determinism(tmp_path):
    m = DatasetManifest(7, "abc", _records())
    save_manifest(m, tmp_path / "1.jsonl")
    save_manifest(m, tmp_path / "2.jsonl")
    assert (tmp_path / "1.jsonl").read_bytes() == (tmp_path / "2.jsonl").read_bytes()
    back = load_manifest(tmp_path / "1.jsonl")
    assert back.records == m.records and back.global_seed == 7 and back.config_digest == "abc"


def test_footer_reports_poisoned_count():
    recs = [ClipRecord(f"c{i}_pT0", f"clips/c{i}_pT0.gds", Label.NON_HOTSPOT, Split.TRAIN,
                       Poisoned(f"c{i}", "T0")) for i in range(2194)]
    text = manifest_text(DatasetManifest(0, "", recs))
    assert '"Train/NonHotspot/Poisoned":2194' in text.splitlines()[-1]


def test_duplicate_ids_rejected():
    recs = _records()
    text = manifest_text(DatasetManifest(0, "", recs))
    lines = text.splitlines()
    dup = "\n".join([lines[0], lines[1], lines[1]] + lines[2:]) + "\n"
    with pytest.raises(ManifestError, match="duplicate"):
        parse_manifest(dup)


def test_footer_mismatch_rejected():
    text = manifest_text(DatasetManifest(0, "", _records()))
    lines = text.splitlines()
    with pytest.raises(ManifestError):
        parse_manifest("\n".join(lines[:1] + lines[2:]) + "\n")


def test_provenance_cycle_rejected():
    recs = [ClipRecord("x", "x", None, Split.TRAIN, VariantOf("y", 0)),
            ClipRecord("y", "y", None, Split.TRAIN, VariantOf("x", 0))]
    with pytest.raises(ManifestError, match="cycle"):
        manifest_text(DatasetManifest(0, "", recs))


@given(st.lists(st.tuples(st.sampled_from(list(Label) + [None]), st.sampled_from(list(Split)),
                          st.integers(0, 2 ** 64 - 1)), max_size=30))
def test_footer_counts_match_records(rows):
    recs = [ClipRecord(f"r{i}", f"clips/r{i}.gds", lab, sp, Original(), seed)
            for i, (lab, sp, seed) in enumerate(rows)]
    m = parse_manifest(manifest_text(DatasetManifest(0, "", recs)))
    assert sum(m.counts().values()) == len(recs)
    assert m.records == recs
