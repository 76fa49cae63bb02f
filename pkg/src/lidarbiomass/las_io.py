"""Reading, writing, tiling and clipping of LAS point clouds.

Supports LAS 1.2 and 1.4 with point record formats 0, 1 and 6, which covers
the uncompressed export defaults of the common airborne/UAV sensors. LAZ and
every other format/version are rejected loudly. All coordinates are stored
internally as float64 in the file's projected CRS; quantization only happens
at write time (x = raw * scale + offset per axis).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

SUPPORTED_VERSIONS = {(1, 2), (1, 4)}
SUPPORTED_FORMATS = {0, 1, 6}

HEADER_SIZE = {(1, 2): 227, (1, 4): 375}
RECORD_LENGTH = {0: 20, 1: 28, 6: 30}

_DTYPE_F0 = np.dtype([
    ("x", "<i4"), ("y", "<i4"), ("z", "<i4"),
    ("intensity", "<u2"), ("flags", "u1"), ("classification", "u1"),
    ("scan_angle", "i1"), ("user_data", "u1"), ("point_source", "<u2"),
])
_DTYPE_F1 = np.dtype(_DTYPE_F0.descr + [("gps_time", "<f8")])
_DTYPE_F6 = np.dtype([
    ("x", "<i4"), ("y", "<i4"), ("z", "<i4"),
    ("intensity", "<u2"), ("returns", "u1"), ("flags", "u1"),
    ("classification", "u1"), ("user_data", "u1"),
    ("scan_angle", "<i2"), ("point_source", "<u2"), ("gps_time", "<f8"),
])
_POINT_DTYPES = {0: _DTYPE_F0, 1: _DTYPE_F1, 6: _DTYPE_F6}

GROUND_CLASS = 2


class LasError(DataError):
    """Base class for LAS parse/write failures."""


class MalformedHeaderError(LasError):
    """File signature or header fields are not valid LAS."""


class UnsupportedFormatError(LasError):
    """LAS version or point record format outside the supported set."""


class TruncatedFileError(LasError):
    """Point payload shorter than the header promises."""


class CoordinateRangeError(LasError):
    """A coordinate does not fit the 32-bit raw range for the given scale."""


@dataclass(frozen=True)
class PointRecord:
    """One georeferenced laser return."""

    x: float
    y: float
    z: float
    intensity: int = 0
    return_number: int = 1
    number_of_returns: int = 1
    classification: int = 0
    gps_time: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")
        if not 1 <= self.return_number <= 15:
            raise ValueError("return_number must be in 1..15")
        if self.return_number > self.number_of_returns:
            raise ValueError("return_number exceeds number_of_returns")


@dataclass(frozen=True)
class PointCloud:
    """Column-oriented, immutable point cloud.

    Arrays all share one length; `gps_time` may be None when the source
    format carries no time stamps. `scale`/`offset` are the per-axis
    quantization parameters used when the cloud is written out.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    intensity: np.ndarray
    return_number: np.ndarray
    number_of_returns: np.ndarray
    classification: np.ndarray
    gps_time: np.ndarray | None = None
    crs_label: str = ""
    scale: tuple[float, float, float] = (0.001, 0.001, 0.001)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        n = len(self.x)
        arrays = {
            "x": np.asarray(self.x, dtype=np.float64),
            "y": np.asarray(self.y, dtype=np.float64),
            "z": np.asarray(self.z, dtype=np.float64),
            "intensity": np.asarray(self.intensity, dtype=np.uint16),
            "return_number": np.asarray(self.return_number, dtype=np.uint8),
            "number_of_returns": np.asarray(self.number_of_returns, dtype=np.uint8),
            "classification": np.asarray(self.classification, dtype=np.uint8),
        }
        if self.gps_time is not None:
            arrays["gps_time"] = np.asarray(self.gps_time, dtype=np.float64)
        for name, arr in arrays.items():
            if len(arr) != n:
                raise ValueError(f"field {name} has length {len(arr)}, expected {n}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if n:
            for axis in (arrays["x"], arrays["y"], arrays["z"]):
                if not np.all(np.isfinite(axis)):
                    raise ValueError("coordinates must be finite")
            if np.any(arrays["return_number"] > arrays["number_of_returns"]):
                raise ValueError("return_number exceeds number_of_returns")
        if min(self.scale) <= 0:
            raise ValueError("scale must be positive on every axis")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> PointRecord:
        return PointRecord(
            x=float(self.x[i]), y=float(self.y[i]), z=float(self.z[i]),
            intensity=int(self.intensity[i]),
            return_number=int(self.return_number[i]),
            number_of_returns=int(self.number_of_returns[i]),
            classification=int(self.classification[i]),
            gps_time=float(self.gps_time[i]) if self.gps_time is not None else None,
        )

    def subset(self, selector) -> "PointCloud":
        """New cloud keeping rows selected by a boolean mask or index array."""
        return PointCloud(
            x=self.x[selector], y=self.y[selector], z=self.z[selector],
            intensity=self.intensity[selector],
            return_number=self.return_number[selector],
            number_of_returns=self.number_of_returns[selector],
            classification=self.classification[selector],
            gps_time=self.gps_time[selector] if self.gps_time is not None else None,
            crs_label=self.crs_label, scale=self.scale, offset=self.offset,
        )

    def with_fields(self, **replacements) -> "PointCloud":
        """Copy with selected columns replaced (e.g. z or classification)."""
        fields = dict(
            x=self.x, y=self.y, z=self.z, intensity=self.intensity,
            return_number=self.return_number,
            number_of_returns=self.number_of_returns,
            classification=self.classification, gps_time=self.gps_time,
            crs_label=self.crs_label, scale=self.scale, offset=self.offset,
        )
        fields.update(replacements)
        return PointCloud(**fields)

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float], tuple[float, float]]:
        if not len(self):
            raise ValueError("empty cloud has no bounds")
        return (
            (float(self.x.min()), float(self.x.max())),
            (float(self.y.min()), float(self.y.max())),
            (float(self.z.min()), float(self.z.max())),
        )

    @staticmethod
    def from_records(records, crs_label="", scale=(0.001, 0.001, 0.001), offset=(0.0, 0.0, 0.0)):
        records = list(records)
        has_time = any(r.gps_time is not None for r in records)
        return PointCloud(
            x=np.array([r.x for r in records], dtype=np.float64),
            y=np.array([r.y for r in records], dtype=np.float64),
            z=np.array([r.z for r in records], dtype=np.float64),
            intensity=np.array([r.intensity for r in records], dtype=np.uint16),
            return_number=np.array([r.return_number for r in records], dtype=np.uint8),
            number_of_returns=np.array([r.number_of_returns for r in records], dtype=np.uint8),
            classification=np.array([r.classification for r in records], dtype=np.uint8),
            gps_time=(np.array([r.gps_time if r.gps_time is not None else 0.0 for r in records])
                      if has_time else None),
            crs_label=crs_label, scale=scale, offset=offset,
        )


@dataclass(frozen=True)
class TileGrid:
    """Square tiling of the horizontal plane, anchored at `origin`."""

    origin: tuple[float, float] = (0.0, 0.0)
    tile_size: float = 125.0

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")

    def index_of(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.tile_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.tile_size).astype(np.int64)
        return ix, iy


def read_las(path) -> PointCloud:
    """Parse a LAS file into a PointCloud.

    Raises MalformedHeaderError, UnsupportedFormatError or
    TruncatedFileError depending on what is wrong with the file.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 227:
        raise MalformedHeaderError(f"{path}: file shorter than a LAS header")
    if data[:4] != b"LASF":
        raise MalformedHeaderError(f"{path}: bad signature {data[:4]!r}, expected b'LASF'")

    major, minor = data[24], data[25]
    if (major, minor) not in SUPPORTED_VERSIONS:
        raise UnsupportedFormatError(
            f"{path}: LAS {major}.{minor} not supported (only 1.2 and 1.4)")

    header_size, point_offset = struct.unpack_from("<HI", data, 94)
    fmt_byte, record_len = struct.unpack_from("<BH", data, 104)
    if fmt_byte & 0x80:
        raise UnsupportedFormatError(
            f"{path}: LAZ-compressed points; decompress externally (e.g. laszip) first")
    if fmt_byte not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(
            f"{path}: point format {fmt_byte} not supported (only 0, 1, 6)")
    if header_size < HEADER_SIZE[(major, minor)] or point_offset < header_size:
        raise MalformedHeaderError(f"{path}: inconsistent header/point offsets")

    count = struct.unpack_from("<I", data, 107)[0]
    if (major, minor) == (1, 4):
        count14 = struct.unpack_from("<Q", data, 247)[0]
        count = count14 if count14 else count
    if record_len < RECORD_LENGTH[fmt_byte]:
        raise MalformedHeaderError(
            f"{path}: record length {record_len} below format minimum")

    scale = struct.unpack_from("<3d", data, 131)
    offset = struct.unpack_from("<3d", data, 155)
    if min(scale) <= 0:
        raise MalformedHeaderError(f"{path}: non-positive coordinate scale")

    payload = data[point_offset:point_offset + count * record_len]
    if len(payload) < count * record_len:
        raise TruncatedFileError(
            f"{path}: expected {count} points ({count * record_len} bytes), "
            f"got {len(payload)} bytes")

    base = _POINT_DTYPES[fmt_byte]
    if record_len == base.itemsize:
        raw = np.frombuffer(payload, dtype=base, count=count)
    else:  # extra bytes appended per record; skip them
        padded = np.dtype(base.descr + [("_extra", "V", record_len - base.itemsize)])
        raw = np.frombuffer(payload, dtype=padded, count=count)

    if fmt_byte in (0, 1):
        flags = raw["flags"]
        return_number = flags & 0x07
        number_of_returns = (flags >> 3) & 0x07
        classification = raw["classification"] & 0x1F  # drop synthetic/key/withheld bits
    else:
        returns = raw["returns"]
        return_number = returns & 0x0F
        number_of_returns = (returns >> 4) & 0x0F
        classification = raw["classification"]
    # Some writers emit 0 return numbers; clamp into the valid range.
    return_number = np.maximum(return_number, 1).astype(np.uint8)
    number_of_returns = np.maximum(number_of_returns, return_number).astype(np.uint8)

    return PointCloud(
        x=raw["x"] * scale[0] + offset[0],
        y=raw["y"] * scale[1] + offset[1],
        z=raw["z"] * scale[2] + offset[2],
        intensity=raw["intensity"].copy(),
        return_number=return_number,
        number_of_returns=number_of_returns,
        classification=classification.copy(),
        gps_time=raw["gps_time"].copy() if fmt_byte in (1, 6) else None,
        scale=tuple(scale),
        offset=tuple(offset),
    )


def write_las(cloud: PointCloud, path, point_format: int | None = None) -> None:
    """Write a PointCloud as LAS.

    Formats 0/1 are written as LAS 1.2, format 6 as LAS 1.4. When
    `point_format` is None, 1 is used if the cloud has GPS time, else 0.
    Header extrema are the extrema of the quantized coordinates, so a
    read-back reproduces them exactly.
    """
    if not len(cloud):
        raise DataError("refusing to write an empty cloud")
    if point_format is None:
        point_format = 1 if cloud.gps_time is not None else 0
    if point_format not in SUPPORTED_FORMATS:
        raise UnsupportedFormatError(f"cannot write point format {point_format}")

    scale = np.asarray(cloud.scale)
    offset = np.asarray(cloud.offset)
    raw = np.empty((len(cloud), 3), dtype=np.int64)
    for axis, arr in enumerate((cloud.x, cloud.y, cloud.z)):
        raw[:, axis] = np.round((arr - offset[axis]) / scale[axis]).astype(np.int64)
    if raw.max() > np.iinfo(np.int32).max or raw.min() < np.iinfo(np.int32).min:
        raise CoordinateRangeError(
            "coordinates exceed the 32-bit raw range; adjust scale/offset")

    decoded = raw * scale + offset  # what a reader will see
    mins = decoded.min(axis=0)
    maxs = decoded.max(axis=0)

    version = (1, 4) if point_format == 6 else (1, 2)
    header_size = HEADER_SIZE[version]
    record_len = RECORD_LENGTH[point_format]
    n = len(cloud)

    dtype = _POINT_DTYPES[point_format]
    rec = np.zeros(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = raw[:, 0], raw[:, 1], raw[:, 2]
    rec["intensity"] = cloud.intensity
    rec["classification"] = cloud.classification
    rn = cloud.return_number.astype(np.uint8)
    nr = cloud.number_of_returns.astype(np.uint8)
    if point_format in (0, 1):
        if rn.max(initial=1) > 7 or nr.max(initial=1) > 7:
            raise CoordinateRangeError(
                "formats 0/1 store at most 7 returns; use point format 6")
        rec["flags"] = (rn & 0x07) | ((nr & 0x07) << 3)
    else:
        rec["returns"] = (rn & 0x0F) | ((nr & 0x0F) << 4)
    if point_format in (1, 6):
        rec["gps_time"] = cloud.gps_time if cloud.gps_time is not None else 0.0

    by_return = np.zeros(15, dtype=np.uint64)
    counts = np.bincount(rn, minlength=16)[1:16]
    by_return[:len(counts)] = counts

    header = bytearray(header_size)
    header[0:4] = b"LASF"
    header[24] = version[0]
    header[25] = version[1]
    struct.pack_into("<32s", header, 26, b"lidarbiomass")
    struct.pack_into("<32s", header, 58, b"lidarbiomass writer")
    struct.pack_into("<HI", header, 94, header_size, header_size)
    struct.pack_into("<I", header, 100, 0)  # no VLRs
    struct.pack_into("<BH", header, 104, point_format, record_len)
    legacy_count = n if (version == (1, 2) and n <= 0xFFFFFFFF) else 0
    struct.pack_into("<I", header, 107, legacy_count)
    if version == (1, 2):
        struct.pack_into("<5I", header, 111, *(int(c) for c in by_return[:5]))
    struct.pack_into("<3d", header, 131, *scale)
    struct.pack_into("<3d", header, 155, *offset)
    struct.pack_into("<6d", header, 179,
                     maxs[0], mins[0], maxs[1], mins[1], maxs[2], mins[2])
    if version == (1, 4):
        struct.pack_into("<Q", header, 247, n)
        struct.pack_into("<15Q", header, 255, *(int(c) for c in by_return))

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(rec.tobytes())


def tile(cloud: PointCloud, grid: TileGrid) -> list[tuple[tuple[int, int], PointCloud]]:
    """Partition a cloud into square tiles.

    Every point lands in exactly one tile (floor rule on the boundary);
    tiles come back sorted by (ix, iy) for deterministic downstream order.
    """
    if not len(cloud):
        return []
    ix, iy = grid.index_of(cloud.x, cloud.y)
    keys = ix * (2 ** 32) + iy  # composite sort key; iy fits comfortably
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    boundaries = np.nonzero(np.diff(sorted_keys))[0] + 1
    groups = np.split(order, boundaries)
    out = []
    for g in groups:
        out.append(((int(ix[g[0]]), int(iy[g[0]])), cloud.subset(np.sort(g))))
    return out


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_in_polygon(px: np.ndarray, py: np.ndarray, poly) -> np.ndarray:
    """Boolean mask of points inside or on the boundary of a simple polygon."""
    poly = np.asarray(poly, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise DataError("polygon needs at least 3 (x, y) vertices")
    if abs(_polygon_area(poly)) < 1e-12:
        raise DataError("degenerate polygon (zero area)")

    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    span = max(np.abs(poly).max(), 1.0)
    eps = 1e-9 * span

    ax, ay = poly[:, 0], poly[:, 1]
    bx, by = np.roll(ax, -1), np.roll(ay, -1)
    for k in range(len(poly)):
        a0, a1, b0, b1 = ax[k], ay[k], bx[k], by[k]
        # boundary: zero cross product and projection within the segment
        cross = (b0 - a0) * (py - a1) - (b1 - a1) * (px - a0)
        seg2 = (b0 - a0) ** 2 + (b1 - a1) ** 2
        dot = (px - a0) * (b0 - a0) + (py - a1) * (b1 - a1)
        on_edge |= (np.abs(cross) <= eps * max(np.sqrt(seg2), 1.0)) & \
                   (dot >= -eps) & (dot <= seg2 + eps)
        # even-odd ray cast, half-open in y to avoid double counting vertices
        crosses_y = (a1 > py) != (b1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at_y = a0 + (py - a1) * (b0 - a0) / (b1 - a1)
        inside ^= crosses_y & (px < x_at_y)
    return inside | on_edge


def clip_polygon(cloud: PointCloud, poly) -> PointCloud:
    """Keep the points inside a simple polygon; boundary points are included."""
    if not len(cloud):
        return cloud
    return cloud.subset(points_in_polygon(cloud.x, cloud.y, poly))
