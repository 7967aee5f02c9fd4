"""Recording and segment-store I/O.

Two on-disk forms are handled here:

* recordings, as CSV (``t,ch1,...,chC,ecg``) or as a compact binary
  (``BCGR``), with the sample rate taken from a flag or a JSON sidecar;
* preprocessed segment pairs, as the ``BCGS`` binary store.

All binary layouts are little-endian.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._atomic import atomic_write

SEGMENT_LEN = 500

SEGMENT_MAGIC = b"BCGS"
SEGMENT_VERSION = 1
RECORDING_MAGIC = b"BCGR"
RECORDING_VERSION = 1

_SEG_HEADER = struct.Struct("<4sHQ")
_SEG_META = struct.Struct("<Id")
_REC_HEADER = struct.Struct("<4sHdHQ")


class RecordingFormatError(ValueError):
    """Input file does not conform to its declared format."""


@dataclass(frozen=True)
class Recording:
    subject_id: str
    sample_rate_hz: float
    bcg_channels: np.ndarray  # [C, T]
    ecg: np.ndarray  # [T]

    def __post_init__(self):
        bcg = np.atleast_2d(np.asarray(self.bcg_channels, dtype=np.float64))
        ecg = np.asarray(self.ecg, dtype=np.float64)
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if ecg.ndim != 1 or ecg.size < 1:
            raise ValueError("ecg must be a non-empty vector")
        if bcg.shape[0] < 1 or bcg.shape[1] != ecg.size:
            raise ValueError(
                f"channel shape {bcg.shape} does not match ecg length {ecg.size}"
            )
        if not (np.isfinite(bcg).all() and np.isfinite(ecg).all()):
            raise ValueError("recording contains NaN/Inf samples")
        object.__setattr__(self, "bcg_channels", bcg)
        object.__setattr__(self, "ecg", ecg)

    @property
    def n_channels(self) -> int:
        return self.bcg_channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.ecg.size

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz


@dataclass(eq=False)
class SegmentPair:
    """One aligned 5 s window: normalized BCG input and normalized ECG target.

    Samples are held as float32, the precision of the segment store.
    """

    subject_id: str
    segment_index: int
    start_time_s: float
    bcg: np.ndarray
    ecg: np.ndarray
    channel: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        self.bcg = np.ascontiguousarray(self.bcg, dtype=np.float32)
        self.ecg = np.ascontiguousarray(self.ecg, dtype=np.float32)
        for name, arr in (("bcg", self.bcg), ("ecg", self.ecg)):
            if arr.shape != (SEGMENT_LEN,):
                raise ValueError(f"{name} must have {SEGMENT_LEN} samples, got {arr.shape}")
            if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        if self.segment_index < 0:
            raise ValueError("segment_index must be nonnegative")

    @property
    def degenerate(self) -> bool:
        """True when either signal was flat in its window (normalized to all 0.5)."""
        return bool(np.all(self.bcg == 0.5) or np.all(self.ecg == 0.5))

    @property
    def key(self) -> tuple[str, int]:
        return (self.subject_id, self.segment_index)

    def __eq__(self, other):
        if not isinstance(other, SegmentPair):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.segment_index == other.segment_index
            and self.start_time_s == other.start_time_s
            and np.array_equal(self.bcg, other.bcg)
            and np.array_equal(self.ecg, other.ecg)
        )


# -- recordings ---------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def read_sidecar(path) -> dict:
    side = _sidecar_path(Path(path))
    if not side.exists():
        return {}
    with open(side, encoding="utf-8") as fh:
        return json.load(fh)


def _find_ragged_row(path: Path, n_cols: int) -> Optional[int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for i, row in enumerate(reader):
            if len(row) != n_cols:
                return i
    return None


def _check_header(header: Sequence[str]) -> int:
    cols = [h.strip() for h in header]
    if len(cols) < 3 or cols[0] != "t" or cols[-1] != "ecg":
        raise RecordingFormatError(f"malformed header {','.join(cols)!r}; expected t,ch1..chC,ecg")
    expected = [f"ch{i}" for i in range(1, len(cols) - 1)]
    if cols[1:-1] != expected:
        raise RecordingFormatError(
            f"malformed header {','.join(cols)!r}; channel columns must be {','.join(expected)}"
        )
    return len(cols) - 2


def _load_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise RecordingFormatError(f"{path}: empty file")
    n_ch = _check_header(header)
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        row = _find_ragged_row(path, n_ch + 2)
        if row is not None:
            raise RecordingFormatError(f"{path}: ragged row {row} (data row index)") from exc
        raise RecordingFormatError(f"{path}: {exc}") from exc
    if data.shape[0] == 0:
        raise RecordingFormatError(f"{path}: no samples")
    if data.shape[1] != n_ch + 2:
        raise RecordingFormatError(f"{path}: expected {n_ch + 2} columns, got {data.shape[1]}")
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise RecordingFormatError(f"{path}: non-finite sample in row {row} (data row index)")
    return data[:, 1:-1].T.copy(), data[:, -1].copy()


def _load_binary(path: Path) -> tuple[str, float, np.ndarray, np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < _REC_HEADER.size:
        raise RecordingFormatError(f"{path}: truncated header")
    magic, version, rate, n_ch, n = _REC_HEADER.unpack_from(blob, 0)
    if magic != RECORDING_MAGIC:
        raise RecordingFormatError(f"{path}: bad magic {magic!r}")
    if version != RECORDING_VERSION:
        raise RecordingFormatError(f"{path}: unsupported version {version}")
    off = _REC_HEADER.size
    (id_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    subject_id = blob[off : off + id_len].decode("utf-8")
    off += id_len
    expected = off + 8 * n * (n_ch + 1)
    if len(blob) != expected:
        raise RecordingFormatError(
            f"{path}: payload is {len(blob)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(blob, dtype="<f8", offset=off).reshape(n_ch + 1, n)
    if not np.isfinite(arr).all():
        col = int(np.flatnonzero(~np.isfinite(arr).all(axis=0))[0])
        raise RecordingFormatError(f"{path}: non-finite sample in row {col}")
    return subject_id, rate, arr[:-1].astype(np.float64), arr[-1].astype(np.float64)


def load_recording(
    path,
    format: str = "csv",
    sample_rate_hz: Optional[float] = None,
    subject_id: Optional[str] = None,
) -> Recording:
    """Load and validate a recording.

    For CSV the sample rate comes from ``sample_rate_hz`` or, failing that,
    from a ``<name>.json`` sidecar holding ``sample_rate_hz`` (and optionally
    ``subject_id``). Binary recordings carry both in their header.
    """
    path = Path(path)
    if format == "csv":
        side = read_sidecar(path)
        rate = sample_rate_hz if sample_rate_hz is not None else side.get("sample_rate_hz")
        if rate is None:
            raise RecordingFormatError(
                f"{path}: sample rate not given and no sidecar {_sidecar_path(path).name}"
            )
        bcg, ecg = _load_csv(path)
        sid = subject_id or side.get("subject_id") or path.stem
    elif format == "binary":
        sid, rate, bcg, ecg = _load_binary(path)
        if sample_rate_hz is not None and sample_rate_hz != rate:
            raise RecordingFormatError(
                f"{path}: header rate {rate} Hz conflicts with requested {sample_rate_hz} Hz"
            )
        sid = subject_id or sid
    else:
        raise ValueError(f"unknown recording format {format!r}")
    return Recording(subject_id=sid, sample_rate_hz=float(rate), bcg_channels=bcg, ecg=ecg)


def save_recording(rec: Recording, path, format: str = "csv") -> None:
    """Write a recording; CSV output gets a JSON sidecar with rate and subject id."""
    path = Path(path)
    if format == "csv":
        n = rec.n_samples
        t = np.arange(n) / rec.sample_rate_hz
        table = np.column_stack([t, rec.bcg_channels.T, rec.ecg])
        header = ",".join(["t"] + [f"ch{i}" for i in range(1, rec.n_channels + 1)] + ["ecg"])
        with atomic_write(path, "w") as fh:
            np.savetxt(fh, table, delimiter=",", header=header, comments="", fmt="%.10g")
        with atomic_write(_sidecar_path(path), "w") as fh:
            json.dump({"sample_rate_hz": rec.sample_rate_hz, "subject_id": rec.subject_id}, fh)
    elif format == "binary":
        sid = rec.subject_id.encode("utf-8")
        with atomic_write(path) as fh:
            fh.write(
                _REC_HEADER.pack(
                    RECORDING_MAGIC, RECORDING_VERSION, rec.sample_rate_hz,
                    rec.n_channels, rec.n_samples,
                )
            )
            fh.write(struct.pack("<H", len(sid)) + sid)
            fh.write(np.vstack([rec.bcg_channels, rec.ecg]).astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown recording format {format!r}")


# -- segment store -------------------------------------------------------------


def segment_record_size(subject_id: str) -> int:
    """Bytes occupied by one segment record in the store."""
    return 2 + len(subject_id.encode("utf-8")) + _SEG_META.size + 2 * SEGMENT_LEN * 4


def encode_segments(segments: Sequence[SegmentPair]) -> bytes:
    parts = [_SEG_HEADER.pack(SEGMENT_MAGIC, SEGMENT_VERSION, len(segments))]
    for seg in segments:
        sid = seg.subject_id.encode("utf-8")
        if len(sid) > 0xFFFF:
            raise ValueError("subject id too long")
        parts.append(struct.pack("<H", len(sid)))
        parts.append(sid)
        parts.append(_SEG_META.pack(seg.segment_index, seg.start_time_s))
        parts.append(seg.bcg.astype("<f4").tobytes())
        parts.append(seg.ecg.astype("<f4").tobytes())
    return b"".join(parts)


def decode_segments(blob: bytes, source: str = "<bytes>") -> list[SegmentPair]:
    if len(blob) < _SEG_HEADER.size:
        raise RecordingFormatError(f"{source}: truncated header")
    magic, version, count = _SEG_HEADER.unpack_from(blob, 0)
    if magic != SEGMENT_MAGIC:
        raise RecordingFormatError(f"{source}: bad magic {magic!r}")
    if version != SEGMENT_VERSION:
        raise RecordingFormatError(f"{source}: unsupported version {version}")
    off = _SEG_HEADER.size
    payload = SEGMENT_LEN * 4
    out = []
    for i in range(count):
        try:
            (id_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            sid = blob[off : off + id_len].decode("utf-8")
            off += id_len
            idx, start = _SEG_META.unpack_from(blob, off)
            off += _SEG_META.size
        except struct.error as exc:
            raise RecordingFormatError(f"{source}: truncated at segment {i} of {count}") from exc
        if off + 2 * payload > len(blob):
            raise RecordingFormatError(f"{source}: truncated at segment {i} of {count}")
        bcg = np.frombuffer(blob, dtype="<f4", count=SEGMENT_LEN, offset=off)
        ecg = np.frombuffer(blob, dtype="<f4", count=SEGMENT_LEN, offset=off + payload)
        off += 2 * payload
        out.append(SegmentPair(sid, idx, start, bcg.astype(np.float32), ecg.astype(np.float32)))
    if off != len(blob):
        raise RecordingFormatError(
            f"{source}: {len(blob) - off} trailing bytes after {count} declared segments"
        )
    return out


def save_segments(segments: Sequence[SegmentPair], path) -> None:
    blob = encode_segments(segments)
    with atomic_write(path) as fh:
        fh.write(blob)


def load_segments(path) -> list[SegmentPair]:
    path = Path(path)
    return decode_segments(path.read_bytes(), source=str(path))
