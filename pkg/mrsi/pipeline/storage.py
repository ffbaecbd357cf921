"""
Dataset directories: `meta.json` plus one little-endian binary32 file per array.

Complex arrays are interleaved (re, im) pairs, C-order with the last dimension
fastest. Boolean maps are stored as one byte per voxel.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import fastjsonschema
import numpy as np
from pydantic import ValidationError

from mrsi.errors import (
    DataError,
    DimensionMismatchError,
    FormatVersionError,
    MissingArtifactError,
    TruncatedPayloadError,
)
from mrsi.pipeline.core import GridSpec
from mrsi.utils.jcs import write_canonical

FORMAT_VERSION = 1
META_NAME = "meta.json"

log = logging.getLogger("mrsi.storage")

_SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schemas" / "types"
with open(_SCHEMA_DIR / "dataset_meta.v1.schema.json") as f:
    _validate_meta = fastjsonschema.compile(json.load(f))

_DISK_DTYPES = {
    "complex64": np.dtype("<c8"),
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
}


def _disk_dtype_name(arr: np.ndarray) -> str:
    if np.iscomplexobj(arr):
        return "complex64"
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return "uint8"
    return "float32"


@dataclass
class Dataset:
    """In-memory bundle of named arrays sharing one grid."""

    grid: GridSpec
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    axes: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    attrs: Dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray, axes: Sequence[str]) -> "Dataset":
        data = np.asarray(data)
        if len(axes) != data.ndim:
            raise DimensionMismatchError(f"array {name!r} has {data.ndim} dims but {len(axes)} axis labels")
        self.arrays[name] = data
        self.axes[name] = tuple(axes)
        return self

    def get(self, name: str) -> np.ndarray:
        if name not in self.arrays:
            raise MissingArtifactError(f"dataset has no array named {name!r}")
        return self.arrays[name]


def _axis_sizes(grid: GridSpec) -> Dict[str, int]:
    return {"x": grid.nx, "y": grid.ny, "z": grid.nz, "time": grid.n_time, "coil": grid.n_coils}


def _check_axes(grid: GridSpec, name: str, shape: Sequence[int], axes: Sequence[str]) -> None:
    if len(axes) != len(shape):
        raise DimensionMismatchError(f"array {name!r}: {len(axes)} axis labels for shape {list(shape)}")
    sizes = _axis_sizes(grid)
    for label, n in zip(axes, shape):
        if label in sizes and sizes[label] != n:
            raise DimensionMismatchError(
                f"array {name!r}: axis {label!r} has length {n} but metadata declares {sizes[label]}"
            )


class DatasetStore:
    def __init__(self, path):
        self.path = Path(path)

    def exists(self) -> bool:
        return (self.path / META_NAME).is_file()

    def save(self, ds: Dataset) -> None:
        os.makedirs(self.path, exist_ok=True)
        entries = []
        for name in sorted(ds.arrays):
            arr = ds.arrays[name]
            dtype_name = _disk_dtype_name(arr)
            axes = ds.axes.get(name, tuple(f"d{i}" for i in range(arr.ndim)))
            _check_axes(ds.grid, name, arr.shape, axes)
            payload = np.ascontiguousarray(arr, dtype=_DISK_DTYPES[dtype_name])
            payload.tofile(self.path / f"{name}.bin")
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype_name, "axes": list(axes)})
        g = ds.grid
        meta = {
            "format_version": FORMAT_VERSION,
            "nx": g.nx,
            "ny": g.ny,
            "nz": g.nz,
            "n_time": g.n_time,
            "n_coils": g.n_coils,
            "fov_mm": [g.fov_x, g.fov_y, g.fov_z],
            "dwell_s": g.dwell,
            "arrays": entries,
            "attrs": ds.attrs,
        }
        write_canonical(self.path / META_NAME, meta)
        log.debug("saved dataset %s (%d arrays)", self.path, len(entries))

    def load(self, names: Optional[Sequence[str]] = None) -> Dataset:
        meta_path = self.path / META_NAME
        if not meta_path.is_file():
            raise MissingArtifactError(f"no dataset at {self.path} (missing {META_NAME})")
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{meta_path}: invalid JSON ({e})") from e
        version = meta.get("format_version") if isinstance(meta, dict) else None
        if version != FORMAT_VERSION:
            raise FormatVersionError(f"{meta_path}: format_version {version!r}, expected {FORMAT_VERSION}")
        try:
            _validate_meta(meta)
        except fastjsonschema.JsonSchemaException as e:
            raise DataError(f"{meta_path}: {e.message}") from e
        try:
            grid = GridSpec(
                nx=meta["nx"],
                ny=meta["ny"],
                nz=meta["nz"],
                n_time=meta["n_time"],
                n_coils=meta["n_coils"],
                fov_x=meta["fov_mm"][0],
                fov_y=meta["fov_mm"][1],
                fov_z=meta["fov_mm"][2],
                dwell=meta["dwell_s"],
            )
        except ValidationError as e:
            raise DataError(f"{meta_path}: invalid grid ({e.errors()[0]['msg']})") from e
        ds = Dataset(grid=grid, attrs=dict(meta.get("attrs", {})))
        for entry in meta["arrays"]:
            name = entry["name"]
            if names is not None and name not in names:
                continue
            shape = tuple(entry["shape"])
            axes = tuple(entry.get("axes", [f"d{i}" for i in range(len(shape))]))
            _check_axes(grid, name, shape, axes)
            dtype = _DISK_DTYPES[entry["dtype"]]
            bin_path = self.path / f"{name}.bin"
            if not bin_path.is_file():
                raise TruncatedPayloadError(f"{bin_path} is missing")
            expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            actual = bin_path.stat().st_size
            if actual < expected:
                raise TruncatedPayloadError(f"{bin_path}: {actual} bytes, metadata requires {expected}")
            if actual > expected:
                raise DimensionMismatchError(
                    f"{bin_path}: {actual} bytes exceed the {expected} bytes declared by shape {list(shape)}"
                )
            arr = np.fromfile(bin_path, dtype=dtype).reshape(shape)
            ds.arrays[name] = arr.astype(np.bool_) if entry["dtype"] == "uint8" else arr
            ds.axes[name] = axes
        if names is not None:
            missing = [n for n in names if n not in ds.arrays]
            if missing:
                raise MissingArtifactError(f"{self.path}: arrays {missing} not present")
        return ds

    def write_json(self, name: str, obj: Any) -> None:
        os.makedirs(self.path, exist_ok=True)
        write_canonical(self.path / name, obj)

    def read_json(self, name: str) -> Any:
        p = self.path / name
        if not p.is_file():
            raise MissingArtifactError(f"{p} is missing")
        return json.loads(p.read_text(encoding="utf-8"))


def dataset_save(path, ds: Dataset) -> None:
    DatasetStore(path).save(ds)


def dataset_load(path, names: Optional[Sequence[str]] = None) -> Dataset:
    return DatasetStore(path).load(names)
