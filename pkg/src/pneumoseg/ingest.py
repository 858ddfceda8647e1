"""Image ingestion: a narrow DICOM reader, PGM fallback, resizing, normalization.

The DICOM reader accepts Explicit VR Little Endian, uncompressed MONOCHROME
data with 8 or 16 bits allocated. Anything else should be converted to
binary PGM (P5) first.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)
TAG_SOP_INSTANCE_UID = (0x0008, 0x0018)
TAG_PATIENT_SEX = (0x0010, 0x0040)
TAG_VIEW_POSITION = (0x0018, 0x5101)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLUMNS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)

_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"UC", b"UN", b"UR", b"UT", b"SV", b"UV"}
_UNDEFINED = 0xFFFFFFFF


class DicomError(ValueError):
    pass


class UnsupportedTransferSyntax(DicomError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass
class DicomLite:
    image_id: str
    rows: int
    columns: int
    bits_allocated: int
    patient_sex: str = "unknown"
    view_position: str = "unknown"
    pixel_data: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.pixel_data is not None and self.pixel_data.size != self.rows * self.columns:
            raise DicomError(f"{self.image_id}: {self.pixel_data.size} pixels for {self.rows}x{self.columns}")


@dataclass
class Sample:
    image: np.ndarray  # C, S, S float32 in [0, 1]
    mask: np.ndarray  # S, S uint8 in {0, 1}
    id: str = ""


def _text(value: bytes) -> str:
    return value.rstrip(b"\x00 ").decode("ascii", errors="replace").strip()


def _normalize_sex(v):
    v = v.upper()
    return v if v in ("M", "F") else "unknown"


def _normalize_view(v):
    v = v.upper()
    return v if v in ("AP", "PA") else "unknown"


class _Reader:
    def __init__(self, buf, pos):
        self.buf = buf
        self.pos = pos

    def need(self, n, what):
        if self.pos + n > len(self.buf):
            raise DicomError(f"truncated {what} at offset {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left")

    def element(self):
        """Read one explicit-VR element header; returns (tag, vr, length, value_offset)."""
        self.need(8, "element header")
        start = self.pos
        group, elem = struct.unpack_from("<HH", self.buf, self.pos)
        tag = (group, elem)
        if group == 0xFFFE:  # item / delimiters carry no VR
            (length,) = struct.unpack_from("<I", self.buf, self.pos + 4)
            self.pos += 8
            return tag, None, length, self.pos
        vr = self.buf[self.pos + 4:self.pos + 6]
        if vr in _LONG_VRS:
            self.need(12, f"element ({group:04X},{elem:04X}) header")
            (length,) = struct.unpack_from("<I", self.buf, self.pos + 8)
            self.pos += 12
        else:
            (length,) = struct.unpack_from("<H", self.buf, self.pos + 6)
            self.pos += 8
        if not (vr[:1].isalpha() and vr[1:].isalpha()):
            raise DicomError(f"element ({group:04X},{elem:04X}) at offset {start}: invalid VR {vr!r}")
        return tag, vr, length, self.pos

    def skip_value(self, tag, vr, length):
        if length == _UNDEFINED:
            self.skip_undefined(tag)
            return
        self.need(length, f"value of ({tag[0]:04X},{tag[1]:04X})")
        self.pos += length

    def skip_undefined(self, tag):
        # sequence or encapsulated data: walk items until the sequence delimiter
        while True:
            t, vr, length, _ = self.element()
            if t == (0xFFFE, 0xE0DD):
                return
            if t != (0xFFFE, 0xE000):
                raise DicomError(f"unexpected ({t[0]:04X},{t[1]:04X}) inside ({tag[0]:04X},{tag[1]:04X}) at offset {self.pos}")
            if length == _UNDEFINED:
                while True:
                    t2, vr2, l2, _ = self.element()
                    if t2 == (0xFFFE, 0xE00D):
                        break
                    self.skip_value(t2, vr2, l2)
            else:
                self.need(length, "sequence item")
                self.pos += length


def parse_dicom(data: bytes) -> DicomLite:
    """Parse the covered subset of tags from a DICOM Part-10 byte string."""
    if len(data) < 132 or data[128:132] != b"DICM":
        raise DicomError("missing DICM magic after the 128-byte preamble")
    r = _Reader(data, 132)
    values = {}
    syntax = None
    while r.pos < len(data):
        tag, vr, length, off = r.element()
        if tag == TAG_PIXEL_DATA:
            if length == _UNDEFINED:
                raise UnsupportedTransferSyntax("encapsulated (compressed) pixel data is not supported")
            r.need(length, "pixel data")
            values[tag] = data[off:off + length]
            r.pos += length
            continue
        if tag[0] == 0x0002 and syntax is None and tag == TAG_TRANSFER_SYNTAX:
            r.need(length, "transfer syntax")
            syntax = _text(data[off:off + length])
            if syntax != EXPLICIT_VR_LE:
                raise UnsupportedTransferSyntax(f"transfer syntax {syntax} is not Explicit VR Little Endian")
            r.pos += length
            continue
        if tag in (TAG_SOP_INSTANCE_UID, TAG_PATIENT_SEX, TAG_VIEW_POSITION, TAG_ROWS, TAG_COLUMNS, TAG_BITS_ALLOCATED):
            r.need(length, f"value of ({tag[0]:04X},{tag[1]:04X})")
            values[tag] = data[off:off + length]
            r.pos += length
            continue
        r.skip_value(tag, vr, length)
    if syntax is None:
        raise DicomError("file meta information lacks a transfer syntax (0002,0010)")
    for tag in (TAG_ROWS, TAG_COLUMNS, TAG_PIXEL_DATA):
        if tag not in values:
            raise DicomError(f"required element ({tag[0]:04X},{tag[1]:04X}) missing")
    rows = struct.unpack("<H", values[TAG_ROWS][:2])[0]
    cols = struct.unpack("<H", values[TAG_COLUMNS][:2])[0]
    bits = struct.unpack("<H", values[TAG_BITS_ALLOCATED][:2])[0] if TAG_BITS_ALLOCATED in values else 8
    if bits not in (8, 16):
        raise DicomError(f"bits allocated {bits} not supported (8 or 16)")
    dt = np.uint8 if bits == 8 else np.dtype("<u2")
    raw = values[TAG_PIXEL_DATA]
    need = rows * cols * (bits // 8)
    if len(raw) < need:
        raise DicomError(f"pixel data holds {len(raw)} bytes, {rows}x{cols}x{bits}-bit needs {need}")
    pixels = np.frombuffer(raw[:need], dtype=dt).reshape(rows, cols).astype(np.uint8 if bits == 8 else np.uint16)
    return DicomLite(
        image_id=_text(values.get(TAG_SOP_INSTANCE_UID, b"")),
        rows=rows,
        columns=cols,
        bits_allocated=bits,
        patient_sex=_normalize_sex(_text(values.get(TAG_PATIENT_SEX, b""))),
        view_position=_normalize_view(_text(values.get(TAG_VIEW_POSITION, b""))),
        pixel_data=pixels,
    )


def _element(group, elem, vr: bytes, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr in (b"UI", b"OB") else b" "
    if vr in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vr, 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr, len(value)) + value


def write_dicom(ds: DicomLite, transfer_syntax=EXPLICIT_VR_LE, extra_elements=()) -> bytes:
    """Serialize a DicomLite as a minimal Part-10 file (used for fixtures).

    ``extra_elements`` are (group, elem, vr, value) tuples inserted in tag
    order, for exercising the skip-unknown-tag path.
    """
    els = [
        (0x0008, 0x0016, b"UI", b"1.2.840.10008.5.1.4.1.1.7"),
        (*TAG_SOP_INSTANCE_UID, b"UI", ds.image_id.encode()),
        (0x0008, 0x0060, b"CS", b"CR"),
    ]
    if ds.patient_sex in ("M", "F"):
        els.append((*TAG_PATIENT_SEX, b"CS", ds.patient_sex.encode()))
    if ds.view_position in ("AP", "PA"):
        els.append((*TAG_VIEW_POSITION, b"CS", ds.view_position.encode()))
    px = np.asarray(ds.pixel_data)
    els += [
        (0x0028, 0x0002, b"US", struct.pack("<H", 1)),
        (0x0028, 0x0004, b"CS", b"MONOCHROME2"),
        (*TAG_ROWS, b"US", struct.pack("<H", ds.rows)),
        (*TAG_COLUMNS, b"US", struct.pack("<H", ds.columns)),
        (*TAG_BITS_ALLOCATED, b"US", struct.pack("<H", ds.bits_allocated)),
        (0x0028, 0x0101, b"US", struct.pack("<H", ds.bits_allocated)),
        (*TAG_PIXEL_DATA, b"OW" if ds.bits_allocated == 16 else b"OB",
         px.astype("<u2" if ds.bits_allocated == 16 else np.uint8).tobytes()),
    ]
    els += list(extra_elements)
    els.sort(key=lambda e: (e[0], e[1]))
    body = b"".join(_element(*e) for e in els)
    meta_body = _element(0x0002, 0x0001, b"OB", b"\x00\x01") + _element(0x0002, 0x0010, b"UI", transfer_syntax.encode())
    meta = _element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta_body))) + meta_body
    return b"\x00" * 128 + b"DICM" + meta + body


def read_pgm(data: bytes) -> np.ndarray:
    """Binary (P5) PGM; maxval other than 255 is rescaled linearly onto 0..255."""
    if data[:2] != b"P5":
        raise ImageFormatError(f"not a binary PGM: magic {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise ImageFormatError(f"bad PGM header field {data[start:pos]!r}") from None
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"bad PGM dimensions {width}x{height} maxval {maxval}")
    dt = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = width * height * np.dtype(dt).itemsize
    if len(data) - pos < n:
        raise ImageFormatError(f"PGM raster truncated: {len(data) - pos} of {n} bytes")
    px = np.frombuffer(data[pos:pos + n], dtype=dt).reshape(height, width)
    if maxval != 255:
        px = np.round(px.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return px.astype(np.uint8)


def write_pgm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def load_image_fallback(path) -> DicomLite:
    px = read_pgm(Path(path).read_bytes())
    return DicomLite(image_id=Path(path).stem, rows=px.shape[0], columns=px.shape[1], bits_allocated=8, pixel_data=px)


IMAGE_SUFFIXES = (".dcm", ".pgm")


def load_image(path) -> DicomLite:
    """Dispatch on suffix; DICOM without a SOP UID takes the file stem as id."""
    path = Path(path)
    if path.suffix.lower() == ".dcm":
        ds = parse_dicom(path.read_bytes())
        if not ds.image_id:
            ds.image_id = path.stem
        return ds
    if path.suffix.lower() == ".pgm":
        return load_image_fallback(path)
    raise ImageFormatError(f"{path}: unsupported image type (expected .dcm or .pgm)")


def list_images(directory) -> list[Path]:
    """Every .dcm/.pgm under ``directory``, nested folders included, in sorted path order."""
    return sorted(p for p in Path(directory).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def to_uint8(ds: DicomLite) -> np.ndarray:
    """8-bit view of the pixels; 16-bit data is min-max windowed."""
    px = ds.pixel_data
    if px.dtype == np.uint8:
        return px
    lo, hi = int(px.min()), int(px.max())
    if hi == lo:
        return np.zeros(px.shape, dtype=np.uint8)
    return np.round((px.astype(np.float64) - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def _bilinear_axis(n_in, n_out):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_image(pixels: np.ndarray, size) -> np.ndarray:
    """Bilinear resize with half-pixel centers; works on (H, W) or (C, H, W)."""
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resize target must be positive, got {oh}x{ow}")
    arr = np.asarray(pixels)
    h, w = arr.shape[-2:]
    if (h, w) == (oh, ow):
        return arr.astype(np.float32, copy=True) if arr.dtype != np.float64 else arr.copy()
    src = arr.astype(np.float64)
    r0, r1, fr = _bilinear_axis(h, oh)
    c0, c1, fc = _bilinear_axis(w, ow)
    fr = fr[:, None]
    top = src[..., r0, :] * (1 - fr) + src[..., r1, :] * fr
    out = top[..., c0] * (1 - fc) + top[..., c1] * fc
    return out.astype(np.float32)


def _nearest_axis(n_in, n_out):
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; output stays in {0, 1}."""
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh <= 0 or ow <= 0:
        raise ValueError(f"resize target must be positive, got {oh}x{ow}")
    mask = np.asarray(mask)
    h, w = mask.shape
    return (mask[np.ix_(_nearest_axis(h, oh), _nearest_axis(w, ow))] > 0).astype(np.uint8)


def normalize(pixels: np.ndarray, mask: np.ndarray | None = None, channels=3, id="") -> Sample:
    """Pixels on the 0..255 scale to [0, 1] float32, grayscale replicated to ``channels``."""
    img = np.asarray(pixels).astype(np.float32) / np.float32(255.0)
    if img.ndim == 2:
        img = np.repeat(img[None], channels, axis=0)
    if mask is None:
        m = np.zeros(img.shape[-2:], dtype=np.uint8)
    else:
        m = (np.asarray(mask) > 0).astype(np.uint8)  # handles both {0,1} and {0,255}
    return Sample(image=img, mask=m, id=id)


def preprocess(ds: DicomLite, mask: np.ndarray | None, size: int, channels=3) -> Sample:
    """Window to 8 bits, resize image (bilinear) and mask (nearest), normalize."""
    px = to_uint8(ds)
    img = np.clip(resize_image(px, size), 0, 255)
    m = None if mask is None else resize_mask(mask, size)
    return normalize(img, m, channels=channels, id=ds.image_id)


@dataclass
class StatsReport:
    by_sex: dict = field(default_factory=dict)  # sex -> {"positive": n, "negative": n}
    by_view: dict = field(default_factory=dict)
    total: int = 0
    positives: int = 0
    negatives: int = 0
    single_annotation: int = 0
    multi_annotation: int = 0

    def rows(self):
        """(attribute, value, positive, negative, total) including percentages."""
        out = []
        for attr, table in (("Gender", self.by_sex), ("View Position", self.by_view)):
            for key in sorted(table):
                value = _DISPLAY.get(key, key)
                pos, neg = table[key]["positive"], table[key]["negative"]
                tot = pos + neg
                out.append((attr, value, pos, neg, tot,
                            _pct(pos, tot), _pct(neg, tot), _pct(tot, self.total)))
        return out

    def to_text(self) -> str:
        lines = [f"{'Attribute':<14}{'Value':<9}{'Pneumothorax':>18}{'Healthy':>18}{'Total':>18}"]
        for attr, value, pos, neg, tot, pp, pn, pt in self.rows():
            lines.append(f"{attr:<14}{value:<9}{f'{pos} ({pp:.1f}%)':>18}{f'{neg} ({pn:.1f}%)':>18}{f'{tot} ({pt:.1f}%)':>18}")
        lines.append("")
        lines.append(f"{'Number of samples':<44}{self.total:>8}")
        lines.append(f"{'Number of positive cases':<44}{self.positives:>8}")
        lines.append(f"{'Number of negative cases':<44}{self.negatives:>8}")
        lines.append(f"{'Cases with a single mask':<44}{self.single_annotation:>8}")
        lines.append(f"{'Cases with multiple masks':<44}{self.multi_annotation:>8}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attribute", "value", "positive", "negative", "total",
                    "positive_pct", "negative_pct", "total_pct"])
        for attr, value, pos, neg, tot, pp, pn, pt in self.rows():
            w.writerow([attr, value, pos, neg, tot, f"{pp:.1f}", f"{pn:.1f}", f"{pt:.1f}"])
        for name, val in (("samples", self.total), ("positive", self.positives), ("negative", self.negatives),
                          ("single_mask", self.single_annotation), ("multiple_masks", self.multi_annotation)):
            w.writerow(["count", name, "", "", val, "", "", ""])
        return buf.getvalue()


_DISPLAY = {"F": "Female", "M": "Male"}


def _pct(a, b):
    return 100.0 * a / b if b else 0.0


def dataset_stats(records, annotation_counts: dict[str, int] | None = None) -> StatsReport:
    """Counts by sex x label and view x label; single/multi-annotation counts.

    ``records`` are (DicomLite, has_pneumothorax) pairs. ``annotation_counts``
    maps image id to its number of non-empty annotation rows.
    """
    rep = StatsReport()
    for ds, positive in records:
        key = "positive" if positive else "negative"
        for table, value in ((rep.by_sex, ds.patient_sex), (rep.by_view, ds.view_position)):
            table.setdefault(value, {"positive": 0, "negative": 0})[key] += 1
        rep.total += 1
        if positive:
            rep.positives += 1
            n = (annotation_counts or {}).get(ds.image_id, 1)
            if n > 1:
                rep.multi_annotation += 1
            else:
                rep.single_annotation += 1
        else:
            rep.negatives += 1
    return rep
