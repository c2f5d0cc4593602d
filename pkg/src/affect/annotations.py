"""Per-frame multi-task annotation parsing, validation and indexing

Annotation files are UTF-8 text with LF newlines, one header line followed by
one data line per video frame (30 fps timeline, frame index = line order):

    VA  ``valence,arousal``      absent marker ``-5,-5``
    EX  ``expression``           absent marker ``-1``
    AU  ``au1,...,auK``          absent marker ``-1`` in every column
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Literal, Optional, Sequence, Tuple, Union

from .errors import AnnotationFormatError, DatasetIndexError

logger = logging.getLogger(__name__)

TaskKind = Literal["VA", "EX", "AU"]
Number = Union[int, float]
RawVA = Tuple[Number, Number]
RawAU = Tuple[Number, ...]

DEFAULT_N_AU = 8
VA_ABSENT = -5
EX_ABSENT = -1
AU_ABSENT = -1


class Expression(IntEnum):
    """Basic expression classes in label-file order"""

    NEUTRAL = 0
    ANGER = 1
    DISGUST = 2
    FEAR = 3
    HAPPINESS = 4
    SADNESS = 5
    SURPRISE = 6


NUM_EXPRESSIONS = len(Expression)
EXPRESSION_NAMES = tuple(e.name.lower() for e in Expression)


@dataclass(frozen=True)
class ValenceArousal:
    """Affect coordinates; a pseudo label may carry valence only"""

    valence: Optional[float]
    arousal: Optional[float]

    def is_valid(self) -> bool:
        return all(x is not None and -1.0 <= x <= 1.0 for x in (self.valence, self.arousal))


@dataclass(frozen=True)
class FrameRecord:
    """Label state of one video frame"""

    video_id: str
    frame_index: int
    va: Optional[ValenceArousal] = None
    ex: Optional[int] = None
    au: Optional[Tuple[int, ...]] = None
    soft_ex: Optional[Tuple[float, ...]] = None
    pseudo_va: Optional[ValenceArousal] = None
    excluded: bool = False
    # tasks whose raw value was present in the file but out of range
    invalid: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")
        if self.soft_ex is not None and abs(math.fsum(self.soft_ex) - 1.0) > 1e-9:
            raise ValueError(f"soft expression label does not sum to 1: {self.soft_ex}")

    @property
    def key(self) -> Tuple[str, int]:
        return (self.video_id, self.frame_index)


def header_for(kind: TaskKind, n_au: int = DEFAULT_N_AU) -> str:
    if kind == "VA":
        return "valence,arousal"
    if kind == "EX":
        return "expression"
    if kind == "AU":
        return ",".join(f"au{i + 1}" for i in range(n_au))
    raise ValueError(f"unknown annotation kind {kind!r}")


class ParsedInt(int):
    """Integer read from an annotation file, remembering its exact spelling"""

    text: str

    def __new__(cls, value: int, text: str) -> "ParsedInt":
        obj = super().__new__(cls, value)
        obj.text = text
        return obj


class ParsedFloat(float):
    """Float read from an annotation file, remembering its exact spelling"""

    text: str

    def __new__(cls, value: float, text: str) -> "ParsedFloat":
        obj = super().__new__(cls, value)
        obj.text = text
        return obj


def _parse_number(token: str) -> Number:
    stripped = token.strip()
    try:
        return ParsedInt(int(stripped), token)
    except ValueError:
        value = float(stripped)
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {stripped!r}")
        return ParsedFloat(value, token)


def parse_annotation_lines(
    lines: Sequence[str], kind: TaskKind, source: str = "<memory>", n_au: int = DEFAULT_N_AU
) -> List[Union[RawVA, Number, RawAU]]:
    """Parse header plus data lines into raw per-frame values (out-of-range values kept)"""
    expected_header = header_for(kind, n_au)
    if not lines or lines[0].strip() != expected_header:
        found = lines[0].strip() if lines else "<empty file>"
        raise AnnotationFormatError(source, 1, f"expected header {expected_header!r}, found {found!r}")

    width = expected_header.count(",") + 1
    entries: List[Union[RawVA, Number, RawAU]] = []
    for line_no, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r\n")
        if not line.strip():
            raise AnnotationFormatError(source, line_no, "empty data line")
        tokens = line.split(",")
        if len(tokens) != width:
            raise AnnotationFormatError(source, line_no, f"expected {width} fields, found {len(tokens)}")
        try:
            values = tuple(_parse_number(t) for t in tokens)
        except ValueError as e:
            raise AnnotationFormatError(source, line_no, f"non-numeric field: {e}") from e
        entries.append(values[0] if kind == "EX" else values)
    return entries


def parse_annotation_file(
    path: Union[str, Path], kind: TaskKind, n_au: int = DEFAULT_N_AU
) -> List[Union[RawVA, Number, RawAU]]:
    """Read an annotation file of the given kind"""
    with open(path, "r", encoding="utf-8", newline="") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    entries = parse_annotation_lines(lines, kind, source=str(path), n_au=n_au)
    logger.debug(f"Parsed {len(entries)} {kind} entries from {path}")
    return entries


def _format_number(value: Number) -> str:
    text = getattr(value, "text", None)
    if text is not None:
        return text
    return str(int(value)) if isinstance(value, int) else repr(float(value))


def serialize_annotations(entries: Iterable[Union[RawVA, Number, RawAU]], kind: TaskKind, n_au: int = DEFAULT_N_AU) -> str:
    """Inverse of parse_annotation_lines; parsed values keep their original spelling"""
    lines = [header_for(kind, n_au)]
    for entry in entries:
        values = (entry,) if kind == "EX" else entry
        lines.append(",".join(_format_number(v) for v in values))
    return "\n".join(lines) + "\n"


def raw_from_record(record: FrameRecord, kind: TaskKind, n_au: int = DEFAULT_N_AU) -> Union[RawVA, Number, RawAU]:
    """Raw file value for one task of a record, absent markers included"""
    if kind == "VA":
        if record.va is None:
            return (VA_ABSENT, VA_ABSENT)
        return (record.va.valence, record.va.arousal)
    if kind == "EX":
        return EX_ABSENT if record.ex is None else int(record.ex)
    if record.au is None:
        return tuple([AU_ABSENT] * n_au)
    return tuple(record.au)


def _is_marker(raw, marker) -> bool:
    if isinstance(raw, tuple):
        return all(v == marker for v in raw)
    return raw == marker


def validate_record(
    raw_va: Optional[Union[RawVA, ValenceArousal]],
    raw_ex: Optional[Number],
    raw_au: Optional[RawAU],
    video_id: str = "",
    frame_index: int = 0,
    n_au: int = DEFAULT_N_AU,
) -> FrameRecord:
    """Turn raw values into a FrameRecord; invalid labels become absent, never errors"""
    invalid = set()

    va: Optional[ValenceArousal] = None
    if isinstance(raw_va, ValenceArousal):
        raw_va = (raw_va.valence, raw_va.arousal)
    if raw_va is not None and not _is_marker(raw_va, VA_ABSENT):
        candidate = (
            ValenceArousal(float(raw_va[0]), float(raw_va[1]))
            if len(raw_va) == 2 and all(v is not None for v in raw_va)
            else None
        )
        if candidate is not None and candidate.is_valid():
            va = candidate
        else:
            invalid.add("VA")

    ex: Optional[int] = None
    if raw_ex is not None and raw_ex != EX_ABSENT:
        if float(raw_ex).is_integer() and 0 <= int(raw_ex) < NUM_EXPRESSIONS:
            ex = int(raw_ex)
        else:
            invalid.add("EX")

    au: Optional[Tuple[int, ...]] = None
    if raw_au is not None and not _is_marker(raw_au, AU_ABSENT):
        if len(raw_au) == n_au and all(v in (0, 1) for v in raw_au):
            au = tuple(int(v) for v in raw_au)
        else:
            invalid.add("AU")

    return FrameRecord(
        video_id=video_id,
        frame_index=frame_index,
        va=va,
        ex=ex,
        au=au,
        invalid=frozenset(invalid),
    )


def revalidate(record: FrameRecord, n_au: int = DEFAULT_N_AU) -> FrameRecord:
    """Validate the labels of an existing record, keeping its other slots"""
    fresh = validate_record(record.va, record.ex, record.au, record.video_id, record.frame_index, n_au)
    return replace(record, va=fresh.va, ex=fresh.ex, au=fresh.au, invalid=record.invalid | fresh.invalid)


@dataclass(frozen=True)
class TaskCounts:
    """Number of records carrying a valid label per task"""

    va: int = 0
    ex: int = 0
    au: int = 0

    def as_dict(self) -> Dict[str, int]:
        return {"va": self.va, "ex": self.ex, "au": self.au}


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable video_id -> ordered records mapping with per-task counts"""

    videos: Tuple[Tuple[str, Tuple[FrameRecord, ...]], ...] = ()
    counts: TaskCounts = TaskCounts()

    def __len__(self) -> int:
        return sum(len(records) for _, records in self.videos)

    @property
    def video_ids(self) -> List[str]:
        return [vid for vid, _ in self.videos]

    def records(self) -> Iterator[FrameRecord]:
        for _, records in self.videos:
            yield from records

    def video(self, video_id: str) -> Tuple[FrameRecord, ...]:
        for vid, records in self.videos:
            if vid == video_id:
                return records
        raise KeyError(video_id)

    def label_summary(self) -> Dict[str, int]:
        """Counts used by run reports; every key is always present"""
        records = list(self.records())
        return {
            "total": len(records),
            "va": self.counts.va,
            "ex": self.counts.ex,
            "au": self.counts.au,
            "excluded": sum(r.excluded for r in records),
            "pseudo_valence": sum(r.pseudo_va is not None and r.pseudo_va.valence is not None for r in records),
            "pseudo_arousal": sum(r.pseudo_va is not None and r.pseudo_va.arousal is not None for r in records),
            "soft_ex": sum(r.soft_ex is not None for r in records),
        }


def count_labels(records: Iterable[FrameRecord]) -> TaskCounts:
    va = ex = au = 0
    for r in records:
        va += r.va is not None
        ex += r.ex is not None
        au += r.au is not None
    return TaskCounts(va=va, ex=ex, au=au)


def build_dataset_index(records: Iterable[FrameRecord]) -> DatasetIndex:
    """Group records by video; frame indices must be strictly increasing per video"""
    grouped: Dict[str, List[FrameRecord]] = {}
    for record in records:
        bucket = grouped.setdefault(record.video_id, [])
        if bucket and record.frame_index <= bucket[-1].frame_index:
            if record.frame_index == bucket[-1].frame_index:
                raise DatasetIndexError(f"duplicate frame ({record.video_id}, {record.frame_index})")
            raise DatasetIndexError(
                f"frame {record.frame_index} of video {record.video_id} follows frame {bucket[-1].frame_index}"
            )
        bucket.append(record)

    videos = tuple((vid, tuple(grouped[vid])) for vid in sorted(grouped))
    index = DatasetIndex(videos=videos, counts=count_labels(r for _, rs in videos for r in rs))
    logger.debug(f"Indexed {len(index)} records in {len(videos)} videos")
    return index


def map_records(index: DatasetIndex, fn) -> DatasetIndex:
    """New index with fn applied to every record (ordering and ids preserved)"""
    return build_dataset_index(fn(r) for r in index.records())


def load_annotation_dir(annotations_dir: Union[str, Path], n_au: int = DEFAULT_N_AU) -> DatasetIndex:
    """Parse ``<dir>/{VA,EX,AU}/<video_id>.txt`` into a validated index

    A missing file or a shorter file leaves the task absent for those frames.
    """
    root = Path(annotations_dir)
    kinds: Tuple[TaskKind, ...] = ("VA", "EX", "AU")
    video_ids = sorted({p.stem for kind in kinds for p in (root / kind).glob("*.txt")})

    records: List[FrameRecord] = []
    for video_id in video_ids:
        raw: Dict[str, list] = {}
        for kind in kinds:
            path = root / kind / f"{video_id}.txt"
            raw[kind] = parse_annotation_file(path, kind, n_au) if path.exists() else []
        n_frames = max(len(v) for v in raw.values())
        for i in range(n_frames):
            records.append(
                validate_record(
                    raw["VA"][i] if i < len(raw["VA"]) else None,
                    raw["EX"][i] if i < len(raw["EX"]) else None,
                    raw["AU"][i] if i < len(raw["AU"]) else None,
                    video_id=video_id,
                    frame_index=i,
                    n_au=n_au,
                )
            )
    index = build_dataset_index(records)
    logger.info(f"Loaded annotations for {len(video_ids)} videos ({len(index)} frames) from {root}")
    return index
