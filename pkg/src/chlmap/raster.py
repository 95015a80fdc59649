"""Band-stack rasters: storage, georeferencing, cropping, resampling and masks.

A :class:`BandStack` is an immutable stack of named float32 bands sharing one
grid and one affine :class:`GeoTransform`. Missing data is always NaN.

Two file formats are supported:

* BSF, a small self-describing little-endian format that round-trips float32
  data bit for bit (including NaN payloads).
* A GeoTIFF subset (float32, uncompressed or deflate, stripped or tiled) read
  and written through ``tifffile``; georeferencing comes from the
  ModelPixelScale / ModelTiepoint / GeoKeyDirectory tags.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, FormatError, GeometryError, IntegrityError

BSF_MAGIC = b"BSF1"

WGS84_A = 6378137.0
WGS84_F = 1 / 298.257223563
UTM_K0 = 0.9996

# GeoTIFF tag ids
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEOKEYS = 34735
_TAG_GDAL_METADATA = 42112
_TAG_GDAL_NODATA = 42113


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine transform; ``pixel_height`` is negative for north-up."""

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    crs_id: str = "EPSG:4326"

    def __post_init__(self):
        if self.pixel_width == 0 or self.pixel_height == 0:
            raise DomainError("pixel sizes must be non-zero")

    def pixel_to_geo(self, row, col):
        """Return the CRS coordinates (x, y) of the center of pixel (row, col)."""
        x = self.origin_x + (np.asarray(col, dtype=float) + 0.5) * self.pixel_width
        y = self.origin_y + (np.asarray(row, dtype=float) + 0.5) * self.pixel_height
        if np.ndim(x) == 0:
            return float(x), float(y)
        return x, y

    def geo_to_pixel(self, x, y):
        """Return the (row, col) of the pixel containing CRS point (x, y).

        Out-of-grid coordinates are returned as-is; callers check bounds.
        """
        col = np.floor((np.asarray(x, dtype=float) - self.origin_x) / self.pixel_width)
        row = np.floor((np.asarray(y, dtype=float) - self.origin_y) / self.pixel_height)
        if np.ndim(col) == 0:
            return int(row), int(col)
        return row.astype(np.int64), col.astype(np.int64)

    def to_dict(self):
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_width": self.pixel_width,
            "pixel_height": self.pixel_height,
            "crs_id": self.crs_id,
        }


def pixel_to_geo(t: GeoTransform, row, col):
    return t.pixel_to_geo(row, col)


def geo_to_pixel(t: GeoTransform, x, y):
    return t.geo_to_pixel(x, y)


@dataclass(frozen=True, eq=False)
class BandStack:
    names: tuple
    data: np.ndarray  # (bands, height, width) float32, read-only
    transform: GeoTransform

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise IntegrityError(f"band data must be 3-D, got shape {data.shape}")
        names = tuple(str(n) for n in self.names)
        if len(names) != data.shape[0]:
            raise IntegrityError(
                f"{len(names)} band names for {data.shape[0]} bands")
        if len(set(names)) != len(names):
            raise IntegrityError("band names must be unique")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        elif data.flags.writeable:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "names", names)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def band(self, name: str) -> np.ndarray:
        try:
            return self.data[self.names.index(name)]
        except ValueError:
            raise KeyError(f"band {name!r} not in stack") from None

    def band_indices(self, names: Iterable[str]) -> list[int]:
        missing = [n for n in names if n not in self.names]
        if missing:
            raise KeyError(f"bands not in stack: {missing}")
        return [self.names.index(n) for n in names]

    def bounds(self):
        """(xmin, ymin, xmax, ymax) of the grid extent in CRS units."""
        t = self.transform
        xs = (t.origin_x, t.origin_x + self.width * t.pixel_width)
        ys = (t.origin_y, t.origin_y + self.height * t.pixel_height)
        return min(xs), min(ys), max(xs), max(ys)

    def equals(self, other: "BandStack") -> bool:
        """Bit-level equality of names, data and transform."""
        return (
            self.names == other.names
            and self.transform == other.transform
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


# ---------------------------------------------------------------------------
# Coordinate reference handling
# ---------------------------------------------------------------------------

def _utm_zone(crs_id: str):
    code = crs_id.upper().replace("EPSG:", "")
    if not code.isdigit():
        return None
    code = int(code)
    if 32601 <= code <= 32660:
        return code - 32600, False
    if 32701 <= code <= 32760:
        return code - 32700, True
    return None


def is_geographic(crs_id: str) -> bool:
    return crs_id.upper() in ("EPSG:4326", "WGS84", "OGC:CRS84", "")


def lonlat_to_crs(lon, lat, crs_id: str):
    """Map WGS84 lon/lat to raster CRS coordinates.

    Geographic rasters use lon/lat directly. UTM zones (EPSG:326xx/327xx) use
    the Krueger series for the transverse Mercator projection, accurate to
    well under a millimetre inside a zone.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if is_geographic(crs_id):
        x, y = lon, lat
    else:
        zone = _utm_zone(crs_id)
        if zone is None:
            raise DomainError(f"unsupported CRS {crs_id!r}")
        x, y = _utm_forward(lon, lat, *zone)
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def _utm_forward(lon, lat, zone, south):
    n = WGS84_F / (2 - WGS84_F)
    big_a = WGS84_A / (1 + n) * (1 + n ** 2 / 4 + n ** 4 / 64)
    alpha = (
        n / 2 - 2 * n ** 2 / 3 + 5 * n ** 3 / 16,
        13 * n ** 2 / 48 - 3 * n ** 3 / 5,
        61 * n ** 3 / 240,
    )
    lon0 = math.radians((zone - 1) * 6 - 180 + 3)
    phi = np.radians(lat)
    dlam = np.radians(lon) - lon0
    c = 2 * math.sqrt(n) / (1 + n)
    t = np.sinh(np.arctanh(np.sin(phi)) - c * np.arctanh(c * np.sin(phi)))
    xi = np.arctan2(t, np.cos(dlam))
    eta = np.arctanh(np.sin(dlam) / np.sqrt(1 + t * t))
    e_sum = eta.copy()
    n_sum = xi.copy()
    for j, a in enumerate(alpha, start=1):
        e_sum = e_sum + a * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
        n_sum = n_sum + a * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
    easting = 500000.0 + UTM_K0 * big_a * e_sum
    northing = (10000000.0 if south else 0.0) + UTM_K0 * big_a * n_sum
    return easting, northing


# ---------------------------------------------------------------------------
# BSF format
# ---------------------------------------------------------------------------

def write_band_stack(stack: BandStack, path) -> None:
    """Write ``stack`` as BSF (or GeoTIFF when the suffix is .tif/.tiff)."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        write_geotiff(stack, path)
        return
    parts = [BSF_MAGIC, struct.pack("<III", stack.width, stack.height, stack.count)]
    for name in stack.names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
    t = stack.transform
    parts.append(struct.pack("<4d", t.origin_x, t.origin_y, t.pixel_width, t.pixel_height))
    crs = t.crs_id.encode("utf-8")
    parts.append(struct.pack("<H", len(crs)))
    parts.append(crs)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_band_stack(path, format: str | None = None) -> BandStack:
    """Read a BSF file or a GeoTIFF; the format is sniffed when not given."""
    path = Path(path)
    if format is None:
        with open(path, "rb") as fh:
            head = fh.read(4)
        if head == BSF_MAGIC:
            format = "bsf"
        elif head[:2] in (b"II", b"MM"):
            format = "geotiff"
        else:
            raise FormatError(f"{path}: unrecognised header {head!r}")
    if format == "bsf":
        return _read_bsf(path)
    if format in ("geotiff", "geotiff-subset", "tif"):
        return read_geotiff(path)
    raise FormatError(f"unknown band stack format {format!r}")


def _read_bsf(path: Path) -> BandStack:
    buf = path.read_bytes()
    if buf[:4] != BSF_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    try:
        width, height, count = struct.unpack_from("<III", buf, 4)
        off = 16
        names = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            names.append(buf[off:off + ln].decode("utf-8"))
            off += ln
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if count < 1 or width < 1 or height < 1:
        raise FormatError(f"{path}: empty raster declared ({count}x{height}x{width})")
    nbytes = count * height * width * 4
    if len(buf) < off + nbytes + 34:
        raise IntegrityError(
            f"{path}: band data truncated (need {nbytes} bytes after header)")
    data = np.frombuffer(buf, dtype="<f4", count=count * height * width, offset=off)
    data = data.reshape(count, height, width).astype(np.float32)
    off += nbytes
    try:
        ox, oy, pw, ph = struct.unpack_from("<4d", buf, off)
        off += 32
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        crs = buf[off:off + ln].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt trailer ({exc})") from exc
    if off + ln != len(buf):
        raise IntegrityError(f"{path}: {len(buf) - off - ln} trailing bytes")
    return BandStack(tuple(names), data, GeoTransform(ox, oy, pw, ph, crs))


# ---------------------------------------------------------------------------
# GeoTIFF subset
# ---------------------------------------------------------------------------

def _parse_geokeys(values) -> str:
    values = [int(v) for v in values]
    nkeys = values[3]
    keys = {}
    for i in range(nkeys):
        kid, loc, _cnt, val = values[4 + 4 * i: 8 + 4 * i]
        if loc == 0:
            keys[kid] = val
    if 3072 in keys:
        return f"EPSG:{keys[3072]}"
    if 2048 in keys:
        return f"EPSG:{keys[2048]}"
    return "EPSG:4326"


def _gdal_band_names(xml: str, count: int):
    import xml.etree.ElementTree as ET

    try:
        root = ET.fromstring(xml)
    except ET.ParseError:
        return None
    names = {}
    for item in root.iter("Item"):
        if item.get("role") == "description" and item.get("sample") is not None:
            names[int(item.get("sample"))] = item.text or ""
    if len(names) == count:
        return [names[i] for i in range(count)]
    return None


def read_geotiff(path) -> BandStack:
    import tifffile

    path = Path(path)
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            tags = page.tags
            if _TAG_PIXEL_SCALE not in tags or _TAG_TIEPOINT not in tags:
                raise FormatError(f"{path}: missing georeferencing tags")
            sx, sy = tags[_TAG_PIXEL_SCALE].value[:2]
            tie = tags[_TAG_TIEPOINT].value
            crs = _parse_geokeys(tags[_TAG_GEOKEYS].value) if _TAG_GEOKEYS in tags else "EPSG:4326"
            arr = page.asarray()
            spp = page.samplesperpixel
            planar_separate = page.planarconfig == 2
            desc = page.description or ""
            gdal_xml = tags[_TAG_GDAL_METADATA].value if _TAG_GDAL_METADATA in tags else None
            nodata = tags[_TAG_GDAL_NODATA].value if _TAG_GDAL_NODATA in tags else None
    except tifffile.TiffFileError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3 and spp > 1 and not planar_separate:
        arr = np.moveaxis(arr, -1, 0)
    if arr.ndim != 3:
        raise IntegrityError(f"{path}: unsupported array shape {arr.shape}")
    if arr.dtype.kind != "f":
        raise FormatError(f"{path}: only floating point GeoTIFFs are supported")
    data = arr.astype(np.float32)
    if nodata is not None:
        try:
            nd = float(str(nodata).strip("\x00 "))
        except ValueError:
            nd = None
        if nd is not None and not math.isnan(nd):
            data = np.where(data == nd, np.float32(np.nan), data)
    names = None
    if desc.startswith("{"):
        try:
            names = json.loads(desc).get("band_names")
        except ValueError:
            names = None
    if names is None and gdal_xml:
        names = _gdal_band_names(gdal_xml, data.shape[0])
    if names is None or len(names) != data.shape[0]:
        names = [f"band_{i + 1}" for i in range(data.shape[0])]
    # tiepoint maps raster (i, j) to model (x, y)
    i0, j0, _, x0, y0, _ = tie[:6]
    transform = GeoTransform(x0 - i0 * sx, y0 + j0 * sy, float(sx), -float(sy), crs)
    return BandStack(tuple(names), data, transform)


def write_geotiff(stack: BandStack, path) -> None:
    """Write a float32 band-sequential GeoTIFF with NaN as nodata."""
    import tifffile

    t = stack.transform
    if t.pixel_height > 0:
        raise DomainError("GeoTIFF writer expects a north-up transform")
    if is_geographic(t.crs_id):
        code = 4326
        keys = [1, 1, 0, 3, 1024, 0, 1, 2, 1025, 0, 1, 1, 2048, 0, 1, code]
    else:
        code = int(t.crs_id.upper().replace("EPSG:", ""))
        keys = [1, 1, 0, 3, 1024, 0, 1, 1, 1025, 0, 1, 1, 3072, 0, 1, code]
    extratags = [
        (_TAG_PIXEL_SCALE, "d", 3, (t.pixel_width, -t.pixel_height, 0.0), False),
        (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0), False),
        (_TAG_GEOKEYS, "H", len(keys), keys, False),
        (_TAG_GDAL_NODATA, "s", 0, "nan", False),
    ]
    data = np.ascontiguousarray(stack.data, dtype=np.float32)
    single = data.shape[0] == 1
    tifffile.imwrite(
        path,
        data[0] if single else data,
        photometric="minisblack",
        planarconfig=None if single else "separate",
        compression="zlib",
        description=json.dumps({"band_names": list(stack.names)}),
        metadata=None,
        extratags=extratags,
    )


# ---------------------------------------------------------------------------
# Crop and resample
# ---------------------------------------------------------------------------

def _snap(v: np.ndarray, tol=1e-9):
    r = np.round(v)
    return np.where(np.abs(v - r) < tol, r, v)


def crop_geo(stack: BandStack, north: float, west: float, south: float, east: float) -> BandStack:
    """Crop to the smallest pixel-aligned window containing a lon/lat box.

    The box is expanded outward to whole pixels, never truncated inward.
    """
    if not (north > south and east > west):
        raise DomainError("bbox needs north > south and east > west")
    t = stack.transform
    lons = np.array([west, east, west, east])
    lats = np.array([north, north, south, south])
    xs, ys = lonlat_to_crs(lons, lats, t.crs_id)
    fc = _snap((np.asarray(xs) - t.origin_x) / t.pixel_width)
    fr = _snap((np.asarray(ys) - t.origin_y) / t.pixel_height)
    c0 = max(int(np.floor(fc.min())), 0)
    c1 = min(int(np.ceil(fc.max())), stack.width)
    r0 = max(int(np.floor(fr.min())), 0)
    r1 = min(int(np.ceil(fr.max())), stack.height)
    if c1 <= c0 or r1 <= r0:
        raise DomainError("bbox does not intersect the raster extent")
    new_t = GeoTransform(
        t.origin_x + c0 * t.pixel_width,
        t.origin_y + r0 * t.pixel_height,
        t.pixel_width,
        t.pixel_height,
        t.crs_id,
    )
    return BandStack(stack.names, stack.data[:, r0:r1, c0:c1], new_t)


def resample_nearest(stack: BandStack, target_pixel_size: float) -> BandStack:
    """Nearest-neighbour resampling to a square pixel of ``target_pixel_size``.

    Each output pixel takes the value of the input pixel whose center is
    closest to the output center; on an exact tie the pixel with the larger
    index wins (the one whose half-open cell contains the point).
    """
    if not target_pixel_size > 0:
        raise DomainError("target_pixel_size must be > 0")
    t = stack.transform
    sx = math.copysign(target_pixel_size, t.pixel_width)
    sy = math.copysign(target_pixel_size, t.pixel_height)
    ext_w = stack.width * t.pixel_width / sx
    ext_h = stack.height * t.pixel_height / sy
    new_w = max(int(np.ceil(_snap(np.array(ext_w)))), 1)
    new_h = max(int(np.ceil(_snap(np.array(ext_h)))), 1)
    if new_w == stack.width and new_h == stack.height and sx == t.pixel_width and sy == t.pixel_height:
        return stack
    # output centers expressed in input pixel units
    cx = (np.arange(new_w) + 0.5) * sx / t.pixel_width
    cy = (np.arange(new_h) + 0.5) * sy / t.pixel_height
    src_c = np.clip(np.floor(cx).astype(np.int64), 0, stack.width - 1)
    src_r = np.clip(np.floor(cy).astype(np.int64), 0, stack.height - 1)
    data = stack.data[:, src_r[:, None], src_c[None, :]]
    new_t = GeoTransform(t.origin_x, t.origin_y, sx, sy, t.crs_id)
    return BandStack(stack.names, data, new_t)


# ---------------------------------------------------------------------------
# Polygon masks
# ---------------------------------------------------------------------------

@dataclass
class PolygonMask:
    """One or more polygons in lon/lat; each polygon is [outer, hole, ...]."""

    polygons: list = field(default_factory=list)

    @classmethod
    def from_rings(cls, rings):
        return cls([list(rings)])


def _check_ring(ring) -> np.ndarray:
    arr = np.asarray(ring, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError("ring vertices must be (lon, lat) pairs")
    if arr.shape[0] < 4:
        raise GeometryError("a closed ring needs at least 3 distinct vertices")
    if not np.array_equal(arr[0], arr[-1]):
        raise GeometryError("ring is not closed (first vertex != last vertex)")
    if len(np.unique(arr[:-1], axis=0)) < 3:
        raise GeometryError("ring has fewer than 3 distinct vertices")
    return arr


def _ring_inside_grid(ring_xy: np.ndarray, t: GeoTransform, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill of one ring over pixel centers.

    A center (px, py) is inside when a ray toward +x crosses an odd number of
    edges. An edge (x1,y1)-(x2,y2) counts when exactly one endpoint has
    y > py and its crossing abscissa is strictly greater than px. The rule is
    the classic half-open ray-casting test and resolves on-edge centers
    deterministically.
    """
    x1, y1 = ring_xy[:-1, 0], ring_xy[:-1, 1]
    x2, y2 = ring_xy[1:, 0], ring_xy[1:, 1]
    xs_c = t.origin_x + (np.arange(width) + 0.5) * t.pixel_width
    out = np.zeros((height, width), dtype=bool)
    for r in range(height):
        py = t.origin_y + (r + 0.5) * t.pixel_height
        hit = (y1 > py) != (y2 > py)
        if not hit.any():
            continue
        a1, b1, a2, b2 = x1[hit], y1[hit], x2[hit], y2[hit]
        xint = a1 + (py - b1) * (a2 - a1) / (b2 - b1)
        xint.sort()
        # crossings strictly to the right of each center
        right = xint.size - np.searchsorted(xint, xs_c, side="right")
        out[r] = (right % 2) == 1
    return out


def rasterize_polygon(mask_source, target: BandStack) -> np.ndarray:
    """Boolean grid: pixel centers inside an outer ring and outside its holes.

    ``mask_source`` may be a :class:`PolygonMask`, a list of rings (one
    polygon) or a list of polygons.
    """
    if isinstance(mask_source, PolygonMask):
        polygons = mask_source.polygons
    else:
        polygons = list(mask_source)
        if polygons and np.asarray(polygons[0][0], dtype=object).ndim == 1:
            polygons = [polygons]
    t = target.transform
    result = np.zeros((target.height, target.width), dtype=bool)
    for rings in polygons:
        if not rings:
            continue
        grids = []
        for ring in rings:
            arr = _check_ring(ring)
            x, y = lonlat_to_crs(arr[:, 0], arr[:, 1], t.crs_id)
            grids.append(_ring_inside_grid(np.column_stack([x, y]), t, target.height, target.width))
        inside = grids[0]
        for hole in grids[1:]:
            inside = inside & ~hole
        result |= inside
    return result


def load_geojson_mask(path) -> PolygonMask:
    """Polygons from a GeoJSON file (Polygon / MultiPolygon, any nesting)."""
    with open(path) as fh:
        doc = json.load(fh)
    polygons = []

    def visit(obj):
        kind = obj.get("type")
        if kind == "FeatureCollection":
            for feat in obj.get("features", []):
                visit(feat)
        elif kind == "Feature":
            if obj.get("geometry"):
                visit(obj["geometry"])
        elif kind == "GeometryCollection":
            for g in obj.get("geometries", []):
                visit(g)
        elif kind == "Polygon":
            polygons.append(obj["coordinates"])
        elif kind == "MultiPolygon":
            polygons.extend(obj["coordinates"])
        else:
            raise GeometryError(f"unsupported GeoJSON type {kind!r}")

    visit(doc)
    return PolygonMask(polygons)


def erode_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square binary erosion; pixels outside the grid count as background."""
    if radius <= 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius), dtype=bool)
    padded[radius:radius + h, radius:radius + w] = mask
    out = mask.copy()
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            out &= padded[radius + dr:radius + dr + h, radius + dc:radius + dc + w]
    return out


def stack_from_arrays(arrays: Sequence[np.ndarray], names: Sequence[str], transform: GeoTransform) -> BandStack:
    return BandStack(tuple(names), np.stack([np.asarray(a, dtype=np.float32) for a in arrays]), transform)
