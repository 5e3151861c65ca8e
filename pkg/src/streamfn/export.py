"""Sample trained networks onto uniform grids and write interchange files
(raw + sidecar, legacy VTK structured points) for external visualization tools."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate
from .errors import FormatError, UsageError
from .volume import ScalarField, VectorField, axis_coords, save_raw, sidecar_path

OUTPUT_KINDS = ("scalar_raw", "scalar_vtk", "error_raw", "error_vtk")
MANIFEST_SCHEMA_VERSION = 1
# A 64^3-data network needs roughly 8x denser sampling to render faithfully;
# 4x per axis is the default compromise.
DEFAULT_RES_FACTOR = 4


@dataclass(frozen=True)
class ExportSpec:
    resolution: tuple[int, int, int]
    outputs: tuple = ("scalar_raw",)
    out_dir: str = "."
    prefix: str = "stream_function"

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or any(r < 2 for r in res):
            raise UsageError(f"export resolution must be >= 2 per axis, got {self.resolution}")
        object.__setattr__(self, "resolution", res)
        for o in self.outputs:
            if o not in OUTPUT_KINDS:
                raise UsageError(f"unknown output kind {o!r}; choose from {OUTPUT_KINDS}")


def default_resolution(field_dims) -> tuple[int, int, int]:
    return tuple(int(d) * DEFAULT_RES_FACTOR for d in field_dims)


def sample_grid(f_or_net, dims) -> ScalarField:
    """Evaluate the network at the voxel-center lattice of [-1,1]^3."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 2 for d in dims):
        raise UsageError(f"sample grid needs >= 2 samples per axis, got {dims}")
    return evaluate._sample_scalar_grid(f_or_net, dims)


# ---------------------------------------------------------------------------
# Legacy VTK structured points
# ---------------------------------------------------------------------------

def _vtk_header(dims) -> list[str]:
    nx, ny, nz = dims
    spacing = [2.0 / (n - 1) if n > 1 else 1.0 for n in dims]
    return [
        "# vtk DataFile Version 3.0",
        "streamfn export",
        "BINARY",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx} {ny} {nz}",
        "ORIGIN -1.0 -1.0 -1.0",
        f"SPACING {spacing[0]:.10g} {spacing[1]:.10g} {spacing[2]:.10g}",
        f"POINT_DATA {nx * ny * nz}",
    ]


def write_vtk(fld, path) -> None:
    """Write a legacy VTK structured-points file, binary big-endian payload."""
    path = Path(path)
    scalar = isinstance(fld, ScalarField)
    lines = _vtk_header(fld.dims)
    if scalar:
        lines += ["SCALARS value float 1", "LOOKUP_TABLE default"]
        payload = fld.data.transpose(2, 1, 0)
    else:
        lines += ["VECTORS velocity float"]
        payload = fld.data.transpose(2, 1, 0, 3)
    blob = np.ascontiguousarray(payload).astype(">f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            fh.write(blob)
            fh.write(b"\n")
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


def read_vtk(path):
    """Read back a legacy VTK structured-points file written by write_vtk."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e

    dims = None
    components = None
    pos = 0
    # header is ASCII lines up to and including the SCALARS/VECTORS declaration
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated VTK header")
        line = blob[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line.startswith("DIMENSIONS"):
            dims = tuple(int(v) for v in line.split()[1:4])
        elif line.startswith("SCALARS"):
            components = 1
        elif line.startswith("LOOKUP_TABLE"):
            break
        elif line.startswith("VECTORS"):
            components = 3
            break
    if dims is None or components is None:
        raise FormatError(f"{path}: missing DIMENSIONS or data declaration")
    nx, ny, nz = dims
    count = nx * ny * nz * components
    if len(blob) < pos + count * 4:
        raise FormatError(f"{path}: truncated VTK payload")
    arr = np.frombuffer(blob, dtype=">f4", count=count, offset=pos)
    arr = arr.astype(np.float32).reshape(nz, ny, nx, components).transpose(2, 1, 0, 3)
    arr = np.ascontiguousarray(arr)
    if components == 1:
        return ScalarField(arr[..., 0], allow_nan=True)
    return VectorField(arr)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def export_bundle(f_or_net, fld: VectorField | None, spec: ExportSpec) -> dict:
    """Write the requested artifacts and a JSON manifest; returns the manifest."""
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "resolution": list(spec.resolution),
        "outputs": {},
    }

    # the manifest always records the sampled f-range at the requested resolution
    scalar = sample_grid(f_or_net, spec.resolution)
    manifest["f_range"] = [float(scalar.data.min()), float(scalar.data.max())]

    if "scalar_raw" in spec.outputs:
        p = out_dir / f"{spec.prefix}.raw"
        save_raw(ScalarField(scalar.data.astype(np.float32)), p)
        manifest["outputs"]["scalar_raw"] = [str(p), str(sidecar_path(p))]
    if "scalar_vtk" in spec.outputs:
        p = out_dir / f"{spec.prefix}.vtk"
        write_vtk(ScalarField(scalar.data.astype(np.float32)), p)
        manifest["outputs"]["scalar_vtk"] = [str(p)]

    if {"error_raw", "error_vtk"} & set(spec.outputs):
        if fld is None:
            raise UsageError("error outputs need the reference vector field")
        err_field, stats = evaluate.err_volume(f_or_net, fld)
        manifest["err_perp"] = stats.to_json()
        if "error_raw" in spec.outputs:
            p = out_dir / f"{spec.prefix}_err.raw"
            save_raw(ScalarField(np.nan_to_num(err_field.data).astype(np.float32)), p)
            manifest["outputs"]["error_raw"] = [str(p), str(sidecar_path(p))]
        if "error_vtk" in spec.outputs:
            p = out_dir / f"{spec.prefix}_err.vtk"
            write_vtk(ScalarField(np.nan_to_num(err_field.data).astype(np.float32)), p)
            manifest["outputs"]["error_vtk"] = [str(p)]

    mpath = out_dir / f"{spec.prefix}_manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    manifest["manifest_path"] = str(mpath)
    return manifest
