"""Volume ingestion, intensity windowing, dataset splits and patch sampling.

On-disk raw format for a volume ``<id>``:

* ``<id>.vol``  - image payload, row-major (D, H, W), little-endian
* ``<id>.seg``  - unsigned 8-bit binary labels, same layout
* ``<id>.json`` - ``{"dims": [D, H, W], "spacing_mm": [sz, sy, sx], "dtype": "f32" | "u8"}``
  where ``dtype`` describes the image payload.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file."""


@dataclass
class VolumeSample:
    image: np.ndarray
    label: np.ndarray
    spacing_mm: tuple[float, float, float]
    id: str

    def __post_init__(self):
        if self.image.ndim != 3:
            raise VolumeFormatError(f"{self.id}: image must be 3-D, got shape {self.image.shape}")
        if self.image.shape != self.label.shape:
            raise VolumeFormatError(
                f"{self.id}: image shape {self.image.shape} != label shape {self.label.shape}"
            )
        if not np.isin(self.label, (0, 1)).all():
            bad = np.unique(self.label[~np.isin(self.label, (0, 1))])
            raise VolumeFormatError(f"{self.id}: label must be binary, found values {bad.tolist()}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise VolumeFormatError(f"{self.id}: spacing must be 3 positive values, got {self.spacing_mm}")

    @property
    def foreground_fraction(self) -> float:
        return float(self.label.mean())


# -- raw volumes ----------------------------------------------------------------

RAW_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_raw_volume(sample: VolumeSample, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image = np.ascontiguousarray(sample.image, dtype="<f4")
    (directory / f"{sample.id}.vol").write_bytes(image.tobytes())
    (directory / f"{sample.id}.seg").write_bytes(np.ascontiguousarray(sample.label, dtype="u1").tobytes())
    sidecar = {"dims": list(image.shape), "spacing_mm": [float(s) for s in sample.spacing_mm], "dtype": "f32"}
    path = directory / f"{sample.id}.json"
    path.write_text(json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def _load_payload(path: Path, dtype: np.dtype, dims) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{path.name}: expected {expected} bytes for dims {list(dims)}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def read_raw_volume(path) -> VolumeSample:
    """Read ``<id>.vol``/``.seg`` given the sidecar path, its stem, or any of the three files."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".vol", ".seg") else path
    sidecar = stem.with_suffix(".json")
    if not sidecar.exists():
        raise VolumeFormatError(f"missing sidecar {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        dims = [int(d) for d in meta["dims"]]
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        dtype_name = meta["dtype"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{sidecar.name}: malformed sidecar ({exc})") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{sidecar.name}: dims must be 3 positive integers, got {dims}")
    if dtype_name not in RAW_DTYPES:
        raise VolumeFormatError(f"{sidecar.name}: unknown dtype {dtype_name!r} (expected f32 or u8)")
    image = _load_payload(stem.with_suffix(".vol"), RAW_DTYPES[dtype_name], dims).astype(np.float32)
    label = _load_payload(stem.with_suffix(".seg"), RAW_DTYPES["u8"], dims)
    return VolumeSample(image, label, spacing, stem.name)


# -- NIfTI-1 --------------------------------------------------------------------

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
NIFTI_HEADER_SIZE = 348


@dataclass
class NiftiVolume:
    data: np.ndarray  # (D, H, W) = (z, y, x)
    spacing_mm: tuple[float, float, float]
    datatype: int


def read_nifti(path) -> NiftiVolume:
    """Minimal single-file, uncompressed NIfTI-1 reader.

    Voxels are stored x-fastest on disk; the returned grid is transposed to
    (z, y, x) so it lines up with the raw format's (D, H, W).
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise VolumeFormatError(f"{path.name}: gzip-compressed NIfTI is not supported; decompress externally")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path.name}: file shorter than the {NIFTI_HEADER_SIZE}-byte header")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == NIFTI_HEADER_SIZE:
            break
    else:
        raise VolumeFormatError(f"{path.name}: sizeof_hdr is not {NIFTI_HEADER_SIZE}")
    if raw[344:348] != b"n+1\x00":
        raise VolumeFormatError(f"{path.name}: bad magic {raw[344:348]!r}, expected b'n+1\\x00'")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = struct.unpack(endian + "f", raw[108:112])[0]
    scl_slope, scl_inter = struct.unpack(endian + "2f", raw[112:120])

    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(
            f"{path.name}: unsupported datatype code {datatype} (supported: {sorted(NIFTI_DTYPES)})"
        )
    ndim = dim[0]
    if not 1 <= ndim <= 3 and not (ndim in (4, 5) and all(d == 1 for d in dim[4:ndim + 1])):
        raise VolumeFormatError(f"{path.name}: expected a 3-D volume, dim = {dim}")
    shape = [max(1, d) for d in dim[1:4]]
    if ndim < 3:
        shape[ndim:] = [1] * (3 - ndim)
    dtype = NIFTI_DTYPES[datatype].newbyteorder(endian)
    offset = int(vox_offset)
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < NIFTI_HEADER_SIZE or len(raw) < offset + nbytes:
        raise VolumeFormatError(
            f"{path.name}: truncated payload, expected {nbytes} bytes at offset {offset}, "
            f"file has {max(0, len(raw) - offset)}"
        )
    xyz = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    grid = xyz.reshape(shape, order="F").transpose(2, 1, 0)
    if scl_slope != 0:
        grid = grid.astype(np.float32) * np.float32(scl_slope) + np.float32(scl_inter)
    else:
        grid = grid.astype(np.float32) if datatype == 16 else grid.copy()
    spacing = tuple(abs(float(pixdim[i])) or 1.0 for i in (3, 2, 1))
    return NiftiVolume(np.ascontiguousarray(grid), spacing, datatype)


def write_nifti(path, grid: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), datatype: int = 16,
                scl_slope: float = 0.0, scl_inter: float = 0.0, magic: bytes = b"n+1\x00") -> Path:
    """Write a little-endian single-file NIfTI-1 from a (z, y, x) grid."""
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported datatype code {datatype}")
    dtype = NIFTI_DTYPES[datatype].newbyteorder("<")
    nz, ny, nx = grid.shape
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)
    sz, sy, sx = spacing_mm
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = magic
    payload = np.ascontiguousarray(grid.transpose(2, 1, 0)).astype(dtype).tobytes(order="F")
    path = Path(path)
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
    return path


def load_nifti_sample(image_path, label_path, sample_id: str | None = None) -> VolumeSample:
    img = read_nifti(image_path)
    lab = read_nifti(label_path)
    sid = sample_id or Path(image_path).name.split(".")[0]
    return VolumeSample(img.data.astype(np.float32), lab.data.astype(np.uint8), img.spacing_mm, sid)


# -- preprocessing --------------------------------------------------------------

HU_WINDOW = (-100.0, 240.0)


def normalize_hu(sample, window_lo: float = HU_WINDOW[0], window_hi: float = HU_WINDOW[1]) -> np.ndarray:
    if not window_lo < window_hi:
        raise ValueError(f"window_lo must be < window_hi, got ({window_lo}, {window_hi})")
    image = sample.image if isinstance(sample, VolumeSample) else np.asarray(sample)
    out = (np.clip(image, window_lo, window_hi) - window_lo) / (window_hi - window_lo)
    return out.astype(np.float32)


# -- splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def get(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "val", "test"):
            raise KeyError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)

    def to_manifest(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def split_sizes(n: int) -> tuple[int, int, int]:
    """(train, val, test) with test = round(0.2 n), val = round(0.1 n), halves rounding up."""
    test = (2 * n + 5) // 10
    val = (n + 5) // 10
    return n - val - test, val, test


def split_dataset(ids, seed: int) -> DatasetSplit:
    ids = list(ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need at least 3 volumes to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("volume ids must be unique")
    _, n_val, n_test = split_sizes(n)
    order = [ids[i] for i in np.random.default_rng(seed).permutation(n)]
    test = tuple(order[:n_test])
    val = tuple(order[n_test:n_test + n_val])
    train = tuple(order[n_test + n_val:])
    return DatasetSplit(train, val, test)


def write_manifest(split: DatasetSplit, directory) -> Path:
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(split.to_manifest(), indent=2) + "\n")
    return path


def read_manifest(directory) -> DatasetSplit:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    data = json.loads(path.read_text())
    return DatasetSplit(*(tuple(data[k]) for k in ("train", "val", "test")))


def load_split(directory, name: str) -> list[VolumeSample]:
    ids = read_manifest(directory).get(name)
    return [read_raw_volume(os.path.join(directory, f"{i}.json")) for i in ids]


# -- patches --------------------------------------------------------------------


@dataclass
class Patch:
    image: np.ndarray
    label: np.ndarray
    origin: tuple[int, int, int]


def _check_patch(shape, extent):
    extent = (extent,) * 3 if isinstance(extent, int) else tuple(extent)
    for axis, size, p in zip("DHW", shape, extent):
        if p > size:
            raise ValueError(f"axis {axis}: patch extent {p} is larger than volume extent {size}")
        if p < 1:
            raise ValueError(f"patch extent must be positive, got {p}")
    return extent


def grid_origins(shape, extent, stride=None) -> list[tuple[int, int, int]]:
    """Tile origins covering the volume; the last tile per axis is flush with the edge."""
    extent = _check_patch(shape, extent)
    stride = extent if stride is None else ((stride,) * 3 if isinstance(stride, int) else tuple(stride))
    axes = []
    for size, p, s in zip(shape, extent, stride):
        starts = list(range(0, size - p + 1, s))
        if starts[-1] != size - p:
            starts.append(size - p)
        axes.append(starts)
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def _cut(arr, origin, extent):
    z, y, x = origin
    return arr[z:z + extent[0], y:y + extent[1], x:x + extent[2]]


def extract_patches(image, label, extent, mode: str = "grid", count: int = 1,
                    rng: np.random.Generator | None = None, stride=None) -> list[Patch]:
    """Cut patches from a volume.

    ``grid`` tiles the whole volume.  ``random_balanced`` draws ``count``
    patches; the first ``ceil(count / 2)`` contain a randomly chosen
    foreground voxel (when there is any foreground), the rest are uniform.
    """
    image = np.asarray(image)
    label = np.asarray(label)
    extent = _check_patch(image.shape, extent)
    if mode == "grid":
        origins = grid_origins(image.shape, extent, stride)
    elif mode == "random_balanced":
        if rng is None:
            raise ValueError("random_balanced sampling needs an rng")
        fg = np.flatnonzero(label)
        origins = []
        for i in range(count):
            if fg.size and i < (count + 1) // 2:
                center = np.unravel_index(fg[rng.integers(fg.size)], image.shape)
                origins.append(tuple(
                    int(min(max(c - p // 2, 0), size - p))
                    for c, p, size in zip(center, extent, image.shape)
                ))
            else:
                origins.append(tuple(int(rng.integers(0, size - p + 1)) for p, size in zip(extent, image.shape)))
    else:
        raise ValueError(f"unknown patch mode {mode!r}")
    return [Patch(_cut(image, o, extent).copy(), _cut(label, o, extent).copy(), o) for o in origins]


def stitch_patches(patches, origins, shape) -> np.ndarray:
    """Reassemble ``(..., pz, py, px)`` patches into ``(..., *shape)``, averaging overlaps."""
    first = np.asarray(patches[0])
    lead = first.shape[:-3]
    acc = np.zeros(lead + tuple(shape), dtype=np.float64)
    hits = np.zeros(tuple(shape), dtype=np.int32)
    for patch, (z, y, x) in zip(patches, origins):
        pz, py, px = np.asarray(patch).shape[-3:]
        acc[..., z:z + pz, y:y + py, x:x + px] += patch
        hits[z:z + pz, y:y + py, x:x + px] += 1
    if (hits == 0).any():
        raise ValueError("patches do not cover the volume")
    return (acc / hits).astype(first.dtype)
