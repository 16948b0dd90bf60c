"""On-disk formats for dense feature maps, dataset manifests, and masks.

Feature tensors are stored one file per image in the RPSF v1 binary layout
(little-endian throughout):

    offset  size  field
    0       4     magic, the ASCII bytes "RPSF"
    4       2     version, u16, must be 1
    6       1     dtype code, u8, must be 0 (float32 little-endian)
    7       1     reserved, u8, must be 0
    8       4     channel count C, u32
    12      4     grid height H, u32
    16      4     grid width W, u32
    20      ...   C*H*W float32 values in [channel][row][column] order

A dataset is described by a JSON manifest: a version, a root directory,
free-form metadata, and one entry per image carrying the feature path,
the original image geometry in pixels, an optional class id, optional
ground-truth boxes and/or a mask path, and a train/test split tag.
Ground-truth masks are binary 8-bit grayscale PGM (P5) images at the
original image resolution where any nonzero pixel is foreground.

Readers are pure and safe to run concurrently; writers never mutate an
existing file (write to a temp file, then rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

RPSF_MAGIC = b"RPSF"
RPSF_VERSION = 1
RPSF_DTYPE_F32LE = 0
_HEADER = struct.Struct("<4sHBBIII")

MANIFEST_VERSION = 1
SPLITS = ("train", "test")


class DataError(Exception):
    """Base class for invalid or inconsistent data artifacts."""


class FormatError(DataError):
    """A binary file does not conform to its declared format."""


class InvariantError(DataError):
    """An in-memory object violates one of its invariants."""


class ManifestError(DataError):
    """A dataset manifest is malformed or self-inconsistent."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box with half-open bounds [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not all(isinstance(v, int) for v in (self.x0, self.y0, self.x1, self.y1)):
            raise InvariantError(f"box coordinates must be integers, got {self!r}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 >= self.x1 or self.y0 >= self.y1:
            raise InvariantError(
                f"box must satisfy 0 <= x0 < x1 and 0 <= y0 < y1, got {self!r}"
            )

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(eq=False)
class FeatureMap:
    """One image's dense feature tensor of shape (C, H, W), float32."""

    image_id: str
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InvariantError(
                f"feature map must have shape (C, H, W), got {self.data.shape}"
            )
        if min(self.data.shape) < 1:
            raise InvariantError(f"feature dimensions must be >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InvariantError(f"feature map {self.image_id!r} contains NaN or Inf")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class ManifestEntry:
    image_id: str
    feature_path: str
    image_width: int
    image_height: int
    split: str
    class_id: int | None = None
    gt_boxes: list[BBox] | None = None
    gt_mask_path: str | None = None


@dataclass
class DatasetManifest:
    """A loaded manifest with its root resolved to an absolute path."""

    version: int
    root: Path
    entries: list[ManifestEntry]
    metadata: dict[str, Any] = field(default_factory=dict)
    source_path: Path | None = None

    def feature_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.feature_path

    def mask_file(self, entry: ManifestEntry) -> Path | None:
        if entry.gt_mask_path is None:
            return None
        return self.root / entry.gt_mask_path

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return [e for e in self.entries if e.split == split]

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)


@dataclass(frozen=True)
class ValidationFailure:
    image_id: str
    path: str
    message: str


@dataclass
class ValidationReport:
    entries_checked: int
    channel_count: int | None
    failures: list[ValidationFailure]

    @property
    def ok(self) -> bool:
        return not self.failures


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_map(fm: FeatureMap, path: str | Path) -> None:
    """Write *fm* to *path* in the RPSF v1 layout.

    The map is re-validated before any bytes are written; an invalid map
    never produces a partial file.
    """
    fm = FeatureMap(fm.image_id, fm.data)  # revalidate invariants
    header = _HEADER.pack(
        RPSF_MAGIC, RPSF_VERSION, RPSF_DTYPE_F32LE, 0,
        fm.channels, fm.height, fm.width,
    )
    payload = fm.data.astype("<f4", copy=False).tobytes(order="C")
    _atomic_write_bytes(Path(path), header + payload)


def read_feature_header(path: str | Path) -> tuple[int, int, int]:
    """Read and validate only the RPSF header; returns (C, H, W).

    Checks the magic, version, dtype, reserved byte, dimension positivity,
    and that the file size matches the declared element count exactly.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, dtype, reserved, c, h, w = _HEADER.unpack(raw)
    if magic != RPSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {RPSF_MAGIC!r}")
    if version != RPSF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {RPSF_VERSION}")
    if dtype != RPSF_DTYPE_F32LE:
        raise FormatError(f"{path}: unsupported dtype code {dtype}, expected {RPSF_DTYPE_F32LE}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved byte must be 0, got {reserved}")
    if min(c, h, w) < 1:
        raise FormatError(f"{path}: dimensions must be >= 1, got C={c} H={h} W={w}")
    expected = _HEADER.size + c * h * w * 4
    if size < expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes total, found {size}"
        )
    if size > expected:
        raise FormatError(
            f"{path}: trailing bytes after payload, expected {expected} bytes total, found {size}"
        )
    return c, h, w


def read_feature_map(path: str | Path, image_id: str | None = None) -> FeatureMap:
    """Read an RPSF v1 file into a validated :class:`FeatureMap`.

    Args:
        path: File to read.
        image_id: Id to attach to the result; defaults to the file stem.

    Raises:
        FormatError: Bad magic, version or dtype mismatch, truncated or
            oversized payload, or non-finite values in the payload.
    """
    path = Path(path)
    c, h, w = read_feature_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        payload = fh.read(c * h * w * 4)
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains NaN or Inf")
    return FeatureMap(image_id if image_id is not None else path.stem, data.copy())


def _parse_box(raw: Any, where: str) -> BBox:
    if (
        not isinstance(raw, (list, tuple))
        or len(raw) != 4
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw)
    ):
        raise ManifestError(f"{where}: box must be a list of 4 integers, got {raw!r}")
    try:
        return BBox(*raw)
    except InvariantError as exc:
        raise ManifestError(f"{where}: {exc}") from exc


def _require(raw: dict[str, Any], key: str, kind: type, where: str) -> Any:
    if key not in raw:
        raise ManifestError(f"{where}: missing required field {key!r}")
    value = raw[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ManifestError(
            f"{where}: field {key!r} must be {kind.__name__}, got {type(value).__name__}"
        )
    return value


def _parse_entry(raw: Any, index: int) -> ManifestEntry:
    where = f"entries[{index}]"
    if not isinstance(raw, dict):
        raise ManifestError(f"{where}: entry must be an object")
    image_id = _require(raw, "image_id", str, where)
    where = f"{where} (image_id={image_id!r})"
    feature_path = _require(raw, "feature_path", str, where)
    width = _require(raw, "image_width", int, where)
    height = _require(raw, "image_height", int, where)
    if width < 1 or height < 1:
        raise ManifestError(f"{where}: image geometry must be positive, got {width}x{height}")
    split = _require(raw, "split", str, where)
    if split not in SPLITS:
        raise ManifestError(f"{where}: split must be one of {SPLITS}, got {split!r}")

    class_id = raw.get("class_id")
    if class_id is not None:
        if not isinstance(class_id, int) or isinstance(class_id, bool) or class_id < 0:
            raise ManifestError(f"{where}: class_id must be a non-negative integer")

    gt_boxes = None
    if raw.get("gt_boxes") is not None:
        if not isinstance(raw["gt_boxes"], list):
            raise ManifestError(f"{where}: gt_boxes must be a list")
        gt_boxes = []
        for bi, braw in enumerate(raw["gt_boxes"]):
            box = _parse_box(braw, f"{where} gt_boxes[{bi}]")
            if box.x1 > width or box.y1 > height:
                raise ManifestError(
                    f"{where} gt_boxes[{bi}]: box {box.as_tuple()} exceeds "
                    f"image bounds {width}x{height}"
                )
            gt_boxes.append(box)

    gt_mask_path = raw.get("gt_mask_path")
    if gt_mask_path is not None and not isinstance(gt_mask_path, str):
        raise ManifestError(f"{where}: gt_mask_path must be a string")

    return ManifestEntry(
        image_id=image_id,
        feature_path=feature_path,
        image_width=width,
        image_height=height,
        split=split,
        class_id=class_id,
        gt_boxes=gt_boxes,
        gt_mask_path=gt_mask_path,
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Entry paths stay relative; the declared root is resolved against the
    manifest file's directory so the dataset is relocatable as a unit.

    Raises:
        ManifestError: Parse failure, missing or ill-typed fields, duplicate
            image ids, or malformed / out-of-bounds ground-truth boxes.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc

    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"{path}: unsupported manifest version {version!r}, expected {MANIFEST_VERSION}"
        )
    root_raw = doc.get("root", ".")
    if not isinstance(root_raw, str):
        raise ManifestError(f"{path}: root must be a string")
    entries_raw = doc.get("entries")
    if not isinstance(entries_raw, list):
        raise ManifestError(f"{path}: entries must be a list")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise ManifestError(f"{path}: metadata must be an object")

    entries = [_parse_entry(raw, i) for i, raw in enumerate(entries_raw)]
    seen: set[str] = set()
    for e in entries:
        if e.image_id in seen:
            raise ManifestError(f"{path}: duplicate image_id {e.image_id!r}")
        seen.add(e.image_id)

    root = Path(root_raw)
    if not root.is_absolute():
        root = (path.parent / root).resolve()
    return DatasetManifest(
        version=version,
        root=root,
        entries=entries,
        metadata=metadata,
        source_path=path.resolve(),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path, root: str = ".") -> None:
    """Serialize *manifest* to JSON with paths relative to *root*."""
    entries = []
    for e in manifest.entries:
        raw: dict[str, Any] = {
            "image_id": e.image_id,
            "feature_path": e.feature_path,
            "image_width": e.image_width,
            "image_height": e.image_height,
            "split": e.split,
        }
        if e.class_id is not None:
            raw["class_id"] = e.class_id
        if e.gt_boxes is not None:
            raw["gt_boxes"] = [list(b.as_tuple()) for b in e.gt_boxes]
        if e.gt_mask_path is not None:
            raw["gt_mask_path"] = e.gt_mask_path
        entries.append(raw)
    doc = {
        "version": manifest.version,
        "root": root,
        "metadata": manifest.metadata,
        "entries": entries,
    }
    _atomic_write_bytes(Path(path), json.dumps(doc, indent=2).encode("utf-8") + b"\n")


def manifest_digest(path: str | Path) -> str:
    """SHA-256 of the manifest file bytes, lowercase hex."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Cross-check every referenced file against the manifest.

    Opens each feature file's header, verifies a single channel count across
    the dataset (the most common C wins; the minority is reported), and
    checks that referenced masks exist and match the image geometry.
    Failures are collected per entry instead of aborting on the first.
    """
    failures: list[ValidationFailure] = []
    channels: dict[str, int] = {}

    for entry in manifest.entries:
        fpath = manifest.feature_file(entry)
        try:
            c, _, _ = read_feature_header(fpath)
            channels[entry.image_id] = c
        except FileNotFoundError:
            failures.append(
                ValidationFailure(entry.image_id, str(fpath), "feature file missing")
            )
        except FormatError as exc:
            failures.append(ValidationFailure(entry.image_id, str(fpath), str(exc)))

        mpath = manifest.mask_file(entry)
        if mpath is not None:
            try:
                mw, mh = read_pgm_header(mpath)
                if (mw, mh) != (entry.image_width, entry.image_height):
                    failures.append(
                        ValidationFailure(
                            entry.image_id,
                            str(mpath),
                            f"mask is {mw}x{mh}, image is "
                            f"{entry.image_width}x{entry.image_height}",
                        )
                    )
            except FileNotFoundError:
                failures.append(
                    ValidationFailure(entry.image_id, str(mpath), "mask file missing")
                )
            except FormatError as exc:
                failures.append(ValidationFailure(entry.image_id, str(mpath), str(exc)))

    reference: int | None = None
    if channels:
        counts: dict[int, int] = {}
        for c in channels.values():
            counts[c] = counts.get(c, 0) + 1
        reference = max(sorted(counts), key=lambda c: counts[c])
        for entry in manifest.entries:
            c = channels.get(entry.image_id)
            if c is not None and c != reference:
                failures.append(
                    ValidationFailure(
                        entry.image_id,
                        str(manifest.feature_file(entry)),
                        f"channel count {c} differs from dataset channel count {reference}",
                    )
                )

    return ValidationReport(
        entries_checked=len(manifest.entries),
        channel_count=reference,
        failures=failures,
    )


# -- PGM (P5) images ------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary PGM (P5, maxval 255)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise InvariantError(f"PGM image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write_bytes(Path(path), header + image.tobytes(order="C"))


def _pgm_tokens(fh) -> Iterator[bytes]:
    # Whitespace-delimited tokens; '#' starts a comment running to end of line.
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            if token:
                yield token
            return
        if ch == b"#":
            while ch not in (b"", b"\n"):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                yield token
                token = b""
            continue
        token += ch


def read_pgm_header(path: str | Path) -> tuple[int, int]:
    """Return (width, height) of a binary PGM without reading the payload."""
    with open(path, "rb") as fh:
        tokens = _pgm_tokens(fh)
        try:
            magic = next(tokens)
            if magic != b"P5":
                raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
            w = int(next(tokens))
            h = int(next(tokens))
            maxval = int(next(tokens))
        except (StopIteration, ValueError) as exc:
            raise FormatError(f"{path}: malformed PGM header") from exc
    if w < 1 or h < 1 or not (0 < maxval <= 255):
        raise FormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    return w, h


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (maxval <= 255) into a uint8 array of shape (H, W)."""
    with open(path, "rb") as fh:
        tokens = _pgm_tokens(fh)
        try:
            magic = next(tokens)
            if magic != b"P5":
                raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
            w = int(next(tokens))
            h = int(next(tokens))
            maxval = int(next(tokens))
        except (StopIteration, ValueError) as exc:
            raise FormatError(f"{path}: malformed PGM header") from exc
        if w < 1 or h < 1 or not (0 < maxval <= 255):
            raise FormatError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
        payload = fh.read(w * h)
    if len(payload) < w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path: str | Path) -> np.ndarray:
    """Read a PGM mask as a boolean array; any nonzero pixel is foreground."""
    return read_pgm(path) > 0
