import pytest

from src.affect.annotations import (
    Expression,
    FrameRecord,
    ValenceArousal,
    build_dataset_index,
    load_annotation_dir,
    parse_annotation_file,
    parse_annotation_lines,
    raw_from_record,
    revalidate,
    serialize_annotations,
    validate_record,
)
from src.affect.errors import AnnotationFormatError, DatasetIndexError


def test_parse_va_line():
    assert parse_annotation_lines(["valence,arousal", "0.5,-0.2"], "VA") == [(0.5, -0.2)]


def test_parse_ex_keeps_out_of_range_value():
    assert parse_annotation_lines(["expression", "7"], "EX") == [7]


def test_parse_au_file(tmp_path):
    path = tmp_path / "video.txt"
    path.write_text("au1,au2,au3,au4,au5,au6,au7,au8\n0,1,0,0,1,0,0,0\n", encoding="utf-8")
    assert parse_annotation_file(path, "AU") == [(0, 1, 0, 0, 1, 0, 0, 0)]


def test_bad_header_reports_line_one():
    with pytest.raises(AnnotationFormatError) as exc:
        parse_annotation_lines(["arousal,valence", "0.1,0.2"], "VA", source="va.txt")
    assert exc.value.line == 1
    assert exc.value.path == "va.txt"


@pytest.mark.parametrize("line", ["0.1,abc", "0.1", "", "0.1,0.2,0.3", "nan,0.1"])
def test_malformed_data_line(line):
    with pytest.raises(AnnotationFormatError) as exc:
        parse_annotation_lines(["valence,arousal", "0.0,0.0", line], "VA")
    assert exc.value.line == 3


def test_serialize_is_inverse_of_parse():
    entries = [(0.25, -0.5), (-5, -5), (1, 0.125)]
    text = serialize_annotations(entries, "VA")
    assert parse_annotation_lines(text.split("\n")[:-1], "VA") == entries


@pytest.mark.parametrize(
    "kind,lines",
    [
        ("VA", ["valence,arousal", "0.50,-0.20", "1e-1,0.3", "-0,+0.3", ".5,-5", "-5,-5"]),
        ("EX", ["expression", "+3", "-1", "07", "4.0"]),
        ("AU", ["au1,au2,au3,au4,au5,au6,au7,au8", "0,1,0,0,1,0,0,0", "-1,-1,-1,-1,-1,-1,-1,-1", "1.0,0,0,0,0,0,0,2"]),
    ],
)
def test_parse_then_serialize_is_byte_exact(tmp_path, kind, lines):
    path = tmp_path / f"{kind}.txt"
    text = "\n".join(lines) + "\n"
    path.write_bytes(text.encode("utf-8"))
    assert serialize_annotations(parse_annotation_file(path, kind), kind).encode("utf-8") == path.read_bytes()


def test_serialize_formats_plain_numbers():
    assert serialize_annotations([(0.1, -1), (-5, -5)], "VA") == "valence,arousal\n0.1,-1\n-5,-5\n"


@pytest.mark.parametrize(
    "va,ex,au",
    [
        ((0.1, 0.2), 3, (0, 1, 0, 0, 0, 0, 0, 1)),
        ((1.5, 0.0), 9, (0, 1, 2, 0, 0, 0, 0, 0)),
        ((-5, -5), -1, (-1,) * 8),
        (None, 2.5, None),
    ],
)
def test_validate_record_is_idempotent(va, ex, au):
    first = validate_record(va, ex, au, "v", 4)
    again = validate_record(first.va, first.ex, first.au, "v", 4)
    assert again.va == first.va
    assert again.ex == first.ex
    assert again.au == first.au
    assert again.invalid <= first.invalid
    assert revalidate(first) == first


def test_absent_markers():
    record = validate_record((-5, -5), -1, (-1,) * 8)
    assert record.va is None and record.ex is None and record.au is None
    assert record.invalid == frozenset()


def test_in_range_labels_present():
    record = validate_record((0.1, 0.2), 3, (0, 1, 0, 0, 0, 0, 0, 1))
    assert record.va == ValenceArousal(0.1, 0.2)
    assert record.ex == Expression.FEAR
    assert record.au == (0, 1, 0, 0, 0, 0, 0, 1)


@pytest.mark.parametrize("position", range(8))
def test_single_au_corruption_makes_au_absent(position):
    au = [0, 1, 0, 0, 1, 0, 0, 0]
    au[position] = -1
    record = validate_record(None, None, tuple(au))
    assert record.au is None
    assert "AU" in record.invalid


@pytest.mark.parametrize("va,ex", [((1.2, 0.0), 0), ((0.0, -1.01), 0), ((0.0, 0.0), 7), ((0.0, 0.0), 2.5)])
def test_out_of_range_is_invalid_not_error(va, ex):
    record = validate_record(va, ex, None)
    assert record.va is None or record.ex is None
    assert record.invalid


def test_raw_from_record_writes_markers():
    record = FrameRecord("v", 0)
    assert raw_from_record(record, "VA") == (-5, -5)
    assert raw_from_record(record, "EX") == -1
    assert raw_from_record(record, "AU", n_au=3) == (-1, -1, -1)


def test_index_counts():
    records = [FrameRecord("v", i, ex=0 if i < 6 else None) for i in range(10)]
    index = build_dataset_index(records)
    assert index.counts.ex == 6
    assert index.counts.va == 0
    assert len(index) == 10


def test_empty_index():
    index = build_dataset_index([])
    assert len(index) == 0
    assert index.counts.as_dict() == {"va": 0, "ex": 0, "au": 0}


def test_duplicate_frame_rejected():
    with pytest.raises(DatasetIndexError):
        build_dataset_index([FrameRecord("v", 3), FrameRecord("v", 3)])


def test_index_orders_videos():
    index = build_dataset_index([FrameRecord("b", 0), FrameRecord("a", 0), FrameRecord("a", 1)])
    assert index.video_ids == ["a", "b"]
    assert [r.frame_index for r in index.video("a")] == [0, 1]


def test_soft_label_must_sum_to_one():
    with pytest.raises(ValueError):
        FrameRecord("v", 0, soft_ex=(0.5, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0))


def test_load_annotation_dir_with_missing_task(tmp_path):
    (tmp_path / "VA").mkdir()
    (tmp_path / "EX").mkdir()
    (tmp_path / "VA" / "clip1.txt").write_text("valence,arousal\n0.1,0.2\n-5,-5\n0.3,0.3\n")
    (tmp_path / "EX" / "clip1.txt").write_text("expression\n4\n")
    index = load_annotation_dir(tmp_path)
    records = index.video("clip1")
    assert len(records) == 3
    assert records[0].ex == Expression.HAPPINESS
    assert records[1].va is None
    assert records[2].ex is None
    assert index.counts.as_dict() == {"va": 2, "ex": 1, "au": 0}
