"""Domain types, label taxonomy and the on-disk point-cloud formats.

Two formats are supported:

* ``MSPC`` binary: little-endian header (magic, version, point count,
  column-presence bitfield) followed by packed per-point records.
* whitespace-delimited text with a header row of canonical column names.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

PathLike = Union[str, Path]

NUM_CLASSES = 6
NUM_CHANNELS = 3
UNLABELED = 255
SENTINEL = -1.0

#: Channel order is fixed as scanner 1, 2, 3.
WAVELENGTHS_NM = (1550, 905, 532)
SPECTRAL_ATTRIBUTES = ("intensity", "reflectance", "amplitude", "deviation")
ALL_PRESENT = 0b111


class LandCoverClass(enum.IntEnum):
    SAND = 0
    GRAVEL = 1
    HIGH_VEGETATION = 2
    LOW_VEGETATION = 3
    FOREST_FLOOR = 4
    WATER = 5
    UNLABELED = 255

    @classmethod
    def labeled(cls) -> list["LandCoverClass"]:
        return [c for c in cls if c != cls.UNLABELED]

    @property
    def display_name(self) -> str:
        return self.name.replace("_", " ").title()


class DatasetRole(enum.Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class CloudFormat(enum.Enum):
    BINARY = "binary"
    TEXT = "text"


class CloudFormatError(ValueError):
    """Raised when a point-cloud file cannot be parsed."""


@dataclass(frozen=True)
class MultispectralPoint:
    x: float
    y: float
    z: float
    intensity: tuple[float, float, float]
    reflectance: tuple[float, float, float]
    amplitude: tuple[float, float, float]
    deviation: tuple[float, float, float]
    return_number: int
    number_of_returns: int
    label: LandCoverClass
    channel_presence: int

    def has_channel(self, c: int) -> bool:
        return bool(self.channel_presence >> c & 1)


def presence_from_values(*attributes: np.ndarray) -> np.ndarray:
    """Presence bits for a channel whose attributes all differ from the sentinel.

    The text format carries no presence column, so this is how it is
    recovered on read.
    """
    attributes = [np.asarray(a).reshape(-1, 3) for a in attributes]
    mask = np.ones(attributes[0].shape, bool)
    for a in attributes:
        mask &= a != SENTINEL
    return (mask * np.array([1, 2, 4])).sum(axis=1).astype(np.uint8)


def _frozen(a: np.ndarray, dtype, shape: tuple) -> np.ndarray:
    if (
        isinstance(a, np.ndarray)
        and not a.flags.writeable
        and a.dtype == dtype
        and a.shape == shape
        and a.flags.c_contiguous
    ):
        return a
    out = np.array(a, dtype=dtype, order="C").reshape(shape)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Columnar multispectral point cloud.

    Spectral columns are ``(n, 3)`` float32 arrays in channel order
    (1550, 905, 532 nm). Channels that were not measured hold ``-1.0`` and
    have their bit cleared in ``channel_presence``. All arrays are read-only.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    reflectance: np.ndarray
    amplitude: np.ndarray
    deviation: np.ndarray
    return_number: np.ndarray
    number_of_returns: np.ndarray
    label: np.ndarray
    channel_presence: np.ndarray

    def __post_init__(self):
        n = len(np.asarray(self.xyz).reshape(-1, 3))
        object.__setattr__(self, "xyz", _frozen(self.xyz, np.float64, (n, 3)))
        for name in SPECTRAL_ATTRIBUTES:
            col = np.asarray(getattr(self, name))
            if col.size != 3 * n:
                raise ValueError(f"column {name!r} has {col.size} values, expected {3 * n}")
            object.__setattr__(self, name, _frozen(col, np.float32, (n, 3)))
        for name in ("return_number", "number_of_returns", "label", "channel_presence"):
            col = np.asarray(getattr(self, name))
            if col.size != n:
                raise ValueError(f"column {name!r} has {col.size} values, expected {n}")
            object.__setattr__(self, name, _frozen(col, np.uint8, (n,)))
        if n and np.any(self.return_number > self.number_of_returns):
            raise ValueError("return_number exceeds number_of_returns")

    @classmethod
    def from_xyz(
        cls,
        xyz: np.ndarray,
        *,
        label: Optional[np.ndarray] = None,
        **columns,
    ) -> "PointCloud":
        """Build a cloud from coordinates, filling absent columns with defaults."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        kw = {name: columns.pop(name, None) for name in SPECTRAL_ATTRIBUTES}
        for name, value in kw.items():
            if value is None:
                kw[name] = np.full((n, 3), SENTINEL, np.float32)
        presence = columns.pop("channel_presence", None)
        if presence is None:
            presence = presence_from_values(*(kw[a] for a in SPECTRAL_ATTRIBUTES))
        rn = columns.pop("return_number", None)
        nr = columns.pop("number_of_returns", None)
        if columns:
            raise TypeError(f"unknown columns: {sorted(columns)}")
        return cls(
            xyz=xyz,
            return_number=np.ones(n, np.uint8) if rn is None else rn,
            number_of_returns=np.ones(n, np.uint8) if nr is None else nr,
            label=np.full(n, UNLABELED, np.uint8) if label is None else label,
            channel_presence=presence,
            **kw,
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls.from_xyz(np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def n(self) -> int:
        return len(self.xyz)

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n == 0:
            raise ValueError("empty cloud has no bounding box")
        return self.xyz.min(axis=0), self.xyz.max(axis=0)

    def columns(self) -> dict[str, np.ndarray]:
        return {
            "xyz": self.xyz,
            **{name: getattr(self, name) for name in SPECTRAL_ATTRIBUTES},
            "return_number": self.return_number,
            "number_of_returns": self.number_of_returns,
            "label": self.label,
            "channel_presence": self.channel_presence,
        }

    def replace(self, **columns) -> "PointCloud":
        cols = self.columns()
        cols.update(columns)
        return PointCloud(**cols)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(**{k: v[index] for k, v in self.columns().items()})

    def with_labels(self, labels: np.ndarray) -> "PointCloud":
        return self.replace(label=np.asarray(labels, np.uint8))

    def point(self, i: int) -> MultispectralPoint:
        return MultispectralPoint(
            x=float(self.xyz[i, 0]),
            y=float(self.xyz[i, 1]),
            z=float(self.xyz[i, 2]),
            intensity=tuple(float(v) for v in self.intensity[i]),
            reflectance=tuple(float(v) for v in self.reflectance[i]),
            amplitude=tuple(float(v) for v in self.amplitude[i]),
            deviation=tuple(float(v) for v in self.deviation[i]),
            return_number=int(self.return_number[i]),
            number_of_returns=int(self.number_of_returns[i]),
            label=LandCoverClass(int(self.label[i])),
            channel_presence=int(self.channel_presence[i]),
        )

    def equals(self, other: "PointCloud") -> bool:
        """Bitwise column equality."""
        a, b = self.columns(), other.columns()
        return all(
            a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
        )

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        cols = [c.columns() for c in clouds]
        return PointCloud(**{k: np.concatenate([c[k] for c in cols]) for k in cols[0]})


@dataclass
class DatasetDescriptor:
    name: str
    path: Path
    role: DatasetRole
    class_histogram: dict[LandCoverClass, int] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: PathLike, role: DatasetRole, name: Optional[str] = None):
        path = Path(path)
        cloud = read_cloud(path)
        return cls(name or path.stem, path, role, class_histogram(cloud))

    @property
    def labeled_points(self) -> int:
        return sum(self.class_histogram.values())


def class_histogram(cloud: PointCloud) -> dict[LandCoverClass, int]:
    """Point counts per labeled class; Unlabeled points are not counted."""
    counts = np.bincount(cloud.label, minlength=256)
    return {c: int(counts[c]) for c in LandCoverClass.labeled()}


def histogram_array(cloud: PointCloud) -> np.ndarray:
    return np.bincount(cloud.label, minlength=256)[:NUM_CLASSES].astype(np.int64)


# --------------------------------------------------------------------------
# binary format

MAGIC = b"MSPC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")

# presence bitfield, one bit per column group in record order
COL_XYZ = 1 << 0
COL_INTENSITY = 1 << 1
COL_REFLECTANCE = 1 << 2
COL_AMPLITUDE = 1 << 3
COL_DEVIATION = 1 << 4
COL_RETURN_NUMBER = 1 << 5
COL_NUMBER_OF_RETURNS = 1 << 6
COL_LABEL = 1 << 7
COL_CHANNEL_PRESENCE = 1 << 8
ALL_COLUMNS = (1 << 9) - 1

_COLUMN_BITS = [
    ("xyz", COL_XYZ, ("<f8", (3,))),
    ("intensity", COL_INTENSITY, ("<f4", (3,))),
    ("reflectance", COL_REFLECTANCE, ("<f4", (3,))),
    ("amplitude", COL_AMPLITUDE, ("<f4", (3,))),
    ("deviation", COL_DEVIATION, ("<f4", (3,))),
    ("return_number", COL_RETURN_NUMBER, ("u1", ())),
    ("number_of_returns", COL_NUMBER_OF_RETURNS, ("u1", ())),
    ("label", COL_LABEL, ("u1", ())),
    ("channel_presence", COL_CHANNEL_PRESENCE, ("u1", ())),
]


def _record_dtype(bits: int) -> np.dtype:
    return np.dtype([(name, dt, shape) for name, bit, (dt, shape) in _COLUMN_BITS if bits & bit])


def _encode_binary(cloud: PointCloud) -> bytes:
    dtype = _record_dtype(ALL_COLUMNS)
    rec = np.empty(cloud.n, dtype=dtype)
    for name, value in cloud.columns().items():
        rec[name] = value
    return _HEADER.pack(MAGIC, FORMAT_VERSION, cloud.n, ALL_COLUMNS) + rec.tobytes()


def _decode_binary(buf: bytes, source: str) -> PointCloud:
    if len(buf) < _HEADER.size:
        raise CloudFormatError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, n, bits = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CloudFormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise CloudFormatError(f"{source}: unsupported version {version} at offset 4")
    if not bits & COL_XYZ or bits & ~ALL_COLUMNS:
        raise CloudFormatError(f"{source}: invalid column bitfield {bits:#x} at offset 16")
    dtype = _record_dtype(bits)
    expected = _HEADER.size + n * dtype.itemsize
    if len(buf) != expected:
        raise CloudFormatError(
            f"{source}: expected {expected} bytes for {n} records, found {len(buf)}"
        )
    rec = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size, count=n)
    bad = ~np.isfinite(rec["xyz"]).all(axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise CloudFormatError(
            f"{source}: non-finite coordinate in record {i} "
            f"(offset {_HEADER.size + i * dtype.itemsize})"
        )
    cols = {name: rec[name] for name in dtype.names}
    cloud = PointCloud.from_xyz(
        cols.pop("xyz"),
        label=cols.pop("label", None),
        **cols,
    )
    return cloud


# --------------------------------------------------------------------------
# text format

TEXT_COLUMNS = (
    "x y z i1 i2 i3 r1 r2 r3 a1 a2 a3 d1 d2 d3 rn nr label".split()
)
_TEXT_GROUPS = {"i": "intensity", "r": "reflectance", "a": "amplitude", "d": "deviation"}


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _encode_text(cloud: PointCloud) -> str:
    lines = [" ".join(TEXT_COLUMNS)]
    xyz = cloud.xyz.tolist()
    spec = np.concatenate(
        [getattr(cloud, _TEXT_GROUPS[g]) for g in "irad"], axis=1
    ).tolist()
    rn, nr, lab = cloud.return_number.tolist(), cloud.number_of_returns.tolist(), cloud.label.tolist()
    for i in range(cloud.n):
        fields = [_fmt_float(v) for v in xyz[i]] + [_fmt_float(v) for v in spec[i]]
        fields += [str(rn[i]), str(nr[i]), str(lab[i])]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def _decode_text(text: str, source: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise CloudFormatError(f"{source}: line 1: missing header row")
    header = lines[0].split()
    unknown = [h for h in header if h not in TEXT_COLUMNS]
    if unknown:
        raise CloudFormatError(f"{source}: line 1: unknown column(s) {unknown}")
    if len(set(header)) != len(header):
        raise CloudFormatError(f"{source}: line 1: duplicate column names")
    if not {"x", "y", "z"} <= set(header):
        raise CloudFormatError(f"{source}: line 1: header must contain x, y and z")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != len(header):
            raise CloudFormatError(
                f"{source}: line {lineno}: expected {len(header)} columns, found {len(parts)}"
            )
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise CloudFormatError(f"{source}: line {lineno}: {exc}") from None
        rows.append(row)
        for name in ("x", "y", "z"):
            v = row[header.index(name)]
            if not math.isfinite(v):
                raise CloudFormatError(f"{source}: line {lineno}: non-finite coordinate {name}")
    table = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    n = len(table)
    col = {h: table[:, j] for j, h in enumerate(header)}
    xyz = np.stack([col["x"], col["y"], col["z"]], axis=1)
    kw = {}
    for g, name in _TEXT_GROUPS.items():
        arr = np.full((n, 3), SENTINEL, np.float32)
        for c in range(3):
            key = f"{g}{c + 1}"
            if key in col:
                arr[:, c] = col[key]
        kw[name] = arr
    presence = presence_from_values(*kw.values())
    ints = {}
    for key, name, default in (("rn", "return_number", 1), ("nr", "number_of_returns", 1), ("label", "label", UNLABELED)):
        if key in col:
            v = col[key]
            if np.any((v != np.round(v)) | (v < 0) | (v > 255)):
                raise CloudFormatError(f"{source}: column {key!r} must hold integers in 0..255")
            ints[name] = v.astype(np.uint8)
        else:
            ints[name] = np.full(n, default, np.uint8)
    try:
        return PointCloud.from_xyz(xyz, channel_presence=presence, **ints, **kw)
    except ValueError as exc:
        raise CloudFormatError(f"{source}: {exc}") from None


# --------------------------------------------------------------------------
# public I/O


def _sniff_format(path: Path, head: bytes) -> CloudFormat:
    if head.startswith(MAGIC):
        return CloudFormat.BINARY
    return CloudFormat.TEXT


def read_cloud(path: PathLike) -> PointCloud:
    """Read a point cloud in either format (detected from the magic bytes)."""
    path = Path(path)
    buf = path.read_bytes()
    if _sniff_format(path, buf[:4]) is CloudFormat.BINARY:
        return _decode_binary(buf, str(path))
    try:
        text = buf.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CloudFormatError(f"{path}: not MSPC binary and not UTF-8 text ({exc})") from None
    return _decode_text(text, str(path))


def write_cloud(cloud: PointCloud, path: PathLike, format: CloudFormat | str = CloudFormat.BINARY) -> None:
    fmt = CloudFormat(format)
    path = Path(path)
    if fmt is CloudFormat.BINARY:
        path.write_bytes(_encode_binary(cloud))
    else:
        path.write_text(_encode_text(cloud))


def encode_cloud(cloud: PointCloud) -> bytes:
    return _encode_binary(cloud)


def decode_cloud(buf: bytes) -> PointCloud:
    return _decode_binary(buf, "<bytes>")


def concat_histograms(hists: Iterable[dict[LandCoverClass, int]]) -> dict[LandCoverClass, int]:
    out = {c: 0 for c in LandCoverClass.labeled()}
    for h in hists:
        for c, v in h.items():
            out[c] += v
    return out
