"""Relative run-length mask codec and the ``ImageId,EncodedPixels`` CSV format.

A payload is a list of ``(offset, length)`` pairs. Offsets are measured from
the end of the previous run (the first from pixel 0). Flat pixel indices run
top-to-bottom within a column, columns left to right, unless row-major order
is requested. An empty mask is written as the literal ``-1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np

HEADER = ("ImageId", "EncodedPixels")
EMPTY_TOKEN = "-1"


class PixelOrder(str, Enum):
    COLUMN_MAJOR = "column"
    ROW_MAJOR = "row"


class CodecError(ValueError):
    """Malformed run payload; ``position`` is the character offset of the bad token."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at byte {position})")
        self.position = position


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RleRecord:
    image_id: str
    runs: tuple[tuple[int, int], ...] | None  # None is the EMPTY sentinel

    @property
    def is_empty(self):
        return self.runs is None or len(self.runs) == 0

    def payload(self) -> str:
        if self.is_empty:
            return EMPTY_TOKEN
        return " ".join(f"{o} {n}" for o, n in self.runs)

    @classmethod
    def empty(cls, image_id):
        return cls(image_id, None)


def parse_payload(text: str) -> tuple[tuple[int, int], ...] | None:
    """Tokenize a payload string; ``-1`` or blank gives the EMPTY sentinel."""
    stripped = text.strip()
    if stripped in ("", EMPTY_TOKEN):
        return None
    tokens, positions = [], []
    pos = 0
    for tok in text.split():
        pos = text.index(tok, pos)
        try:
            tokens.append(int(tok))
        except ValueError:
            raise CodecError(f"non-integer token {tok!r}", pos) from None
        positions.append(pos)
        pos += len(tok)
    if len(tokens) % 2:
        raise CodecError(f"odd token count {len(tokens)}; expected offset/length pairs", positions[-1])
    pairs = []
    for k in range(0, len(tokens), 2):
        off, length = tokens[k], tokens[k + 1]
        if off < 0:
            raise CodecError(f"negative offset {off}", positions[k])
        if length <= 0:
            raise CodecError(f"non-positive run length {length}", positions[k + 1])
        pairs.append((off, length))
    return tuple(pairs)


def _to_flat(mask, order):
    mask = np.asarray(mask)
    return (mask.T if PixelOrder(order) is PixelOrder.COLUMN_MAJOR else mask).reshape(-1)


def _from_flat(flat, height, width, order):
    if PixelOrder(order) is PixelOrder.COLUMN_MAJOR:
        return flat.reshape(width, height).T.copy()
    return flat.reshape(height, width)


def rle_decode(record, height: int, width: int, order=PixelOrder.COLUMN_MAJOR) -> np.ndarray:
    """Decode a record (or raw payload string) into an H x W uint8 {0,1} mask."""
    runs = parse_payload(record) if isinstance(record, str) else record.runs
    flat = np.zeros(height * width, dtype=np.uint8)
    cursor = 0
    for k, (off, length) in enumerate(runs or ()):
        if off < 0 or length <= 0:
            raise CodecError(f"run {k}: invalid pair ({off}, {length})")
        cursor += off
        if cursor + length > flat.size:
            raise CodecError(f"run {k} ends at pixel {cursor + length}, past {height}x{width}={flat.size}")
        flat[cursor:cursor + length] = 1
        cursor += length
    return _from_flat(flat, height, width, order)


def encode_runs(mask, order=PixelOrder.COLUMN_MAJOR) -> tuple[tuple[int, int], ...] | None:
    """Canonical maximal runs of a binary mask, offsets relative to the previous run end."""
    flat = _to_flat(mask, order).astype(bool)
    if not flat.any():
        return None
    padded = np.concatenate([[False], flat, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[0::2], edges[1::2]
    prev_end = np.concatenate([[0], ends[:-1]])
    return tuple(zip((starts - prev_end).tolist(), (ends - starts).tolist()))


def rle_encode(mask, image_id: str = "", order=PixelOrder.COLUMN_MAJOR) -> RleRecord:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return RleRecord(image_id, encode_runs(mask, order))


def union_masks(records, height: int, width: int, order=PixelOrder.COLUMN_MAJOR) -> np.ndarray:
    """Pixelwise OR of all annotations for one image."""
    records = list(records)
    ids = {r.image_id for r in records}
    if len(ids) > 1:
        raise ValueError(f"union_masks: records span several image ids {sorted(ids)}")
    out = np.zeros((height, width), dtype=np.uint8)
    for r in records:
        out |= rle_decode(r, height, width, order)
    return out


def _read_rows(fh, source):
    reader = csv.reader(fh, skipinitialspace=True)
    try:
        header = next(reader)
    except StopIteration:
        raise CsvFormatError(f"{source}: empty file, expected header {','.join(HEADER)}") from None
    if tuple(h.strip() for h in header) != HEADER:
        raise CsvFormatError(f"{source}: row 1: header {header!r}, expected {','.join(HEADER)}")
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise CsvFormatError(f"{source}: row {rowno}: expected 2 columns, got {len(row)}")
        image_id, payload = row[0].strip(), row[1]
        try:
            runs = parse_payload(payload)
        except CodecError as exc:
            raise CsvFormatError(f"{source}: row {rowno}: {exc}") from None
        yield RleRecord(image_id, runs)


def iter_annotation_csv(path):
    """Stream records from an annotation CSV."""
    with open(path, newline="") as fh:
        yield from _read_rows(fh, path)


def parse_annotation_csv(path) -> list[RleRecord]:
    return list(iter_annotation_csv(path))


def parse_annotation_text(text: str, source="<string>") -> list[RleRecord]:
    return list(_read_rows(io.StringIO(text), source))


def format_submission(records) -> str:
    lines = [",".join(HEADER)]
    lines += [f"{r.image_id},{r.payload()}" for r in records]
    return "\n".join(lines) + "\n"


def write_submission_csv(records, path):
    with open(path, "w", newline="") as fh:
        fh.write(format_submission(records))


def group_by_image(records) -> dict[str, list[RleRecord]]:
    """Collect annotations per image id, preserving first-seen order."""
    out: dict[str, list[RleRecord]] = {}
    for r in records:
        out.setdefault(r.image_id, []).append(r)
    return out
