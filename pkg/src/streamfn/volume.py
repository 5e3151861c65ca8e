"""Regular-grid vector/scalar fields on [-1,1]^3: I/O, interpolation, differential operators,
and analytic field generators.

Data layout convention: arrays are indexed ``data[i, j, k]`` with ``i`` along x, ``j`` along y,
``k`` along z.  On disk the voxel order is x-fastest (index = i + nx*(j + ny*k)), components
interleaved, little-endian float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, OutOfDomainError, ShapeError, UsageError

# Voxels with |V| below this are treated as critical points and excluded downstream.
DEGENERATE_SPEED = 1e-12

RAW_DTYPE = np.dtype("<f4")


def axis_coords(n: int) -> np.ndarray:
    """Normalized coordinates of the n grid points along one axis."""
    if n < 1:
        raise ShapeError(f"axis needs at least 1 sample, got {n}")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def grid_coordinates(dims) -> np.ndarray:
    """All voxel-center coordinates as an (nvox, 3) array, x-fastest order."""
    nx, ny, nz = dims
    xs, ys, zs = axis_coords(nx), axis_coords(ny), axis_coords(nz)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ShapeError(f"dims must be 3 positive integers, got {dims}")
    return dims


@dataclass(frozen=True)
class VectorField:
    """A 3-component field sampled on a regular grid over [-1,1]^3."""

    data: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 4 or d.shape[-1] != 3:
            raise ShapeError(f"vector field data must be (nx,ny,nz,3), got {d.shape}")
        _check_dims(d.shape[:3])
        if not np.all(np.isfinite(d)):
            raise DataError("vector field contains NaN/Inf values")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nx, ny, nz = self.dims
        return axis_coords(nx), axis_coords(ny), axis_coords(nz)

    def voxel_coordinates(self) -> np.ndarray:
        return grid_coordinates(self.dims)

    def flat_vectors(self) -> np.ndarray:
        """Per-voxel vectors as (nvox, 3), matching voxel_coordinates() order."""
        return self.data.transpose(2, 1, 0, 3).reshape(-1, 3)

    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=-1)

    def degenerate_mask(self) -> np.ndarray:
        """Boolean grid, True where |V| is below the critical-point threshold."""
        return self.magnitude() < DEGENERATE_SPEED


@dataclass(frozen=True)
class ScalarField:
    """A scalar field sampled on a regular grid over [-1,1]^3.

    NaN entries are permitted and mark masked voxels (e.g. undefined error values).
    """

    data: np.ndarray  # (nx, ny, nz)
    allow_nan: bool = field(default=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise ShapeError(f"scalar field data must be (nx,ny,nz), got {d.shape}")
        _check_dims(d.shape)
        if np.any(np.isinf(d)):
            raise DataError("scalar field contains Inf values")
        if not self.allow_nan and np.any(np.isnan(d)):
            raise DataError("scalar field contains NaN values")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def coords(self):
        nx, ny, nz = self.dims
        return axis_coords(nx), axis_coords(ny), axis_coords(nz)

    def voxel_coordinates(self) -> np.ndarray:
        return grid_coordinates(self.dims)


@dataclass(frozen=True)
class JacobianField:
    """Per-voxel 3x3 Jacobian, entry (r, c) = dV_r / dx_c in normalized coordinates."""

    data: np.ndarray  # (nx, ny, nz, 3, 3)

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 5 or d.shape[-2:] != (3, 3):
            raise ShapeError(f"jacobian data must be (nx,ny,nz,3,3), got {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def dims(self):
        return self.data.shape[:3]


# ---------------------------------------------------------------------------
# Raw file I/O (.raw payload + .json sidecar)
# ---------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def _sidecar_for(path) -> Path:
    # accept both foo.raw.json and foo.json
    p = sidecar_path(path)
    if p.exists():
        return p
    alt = Path(path).with_suffix(".json")
    if alt.exists():
        return alt
    return p


def read_meta(path) -> dict:
    try:
        with open(path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read sidecar {path}: {e}") from e
    return meta


def load_raw(path, meta=None):
    """Load a .raw volume. `meta` is a dict, a sidecar path, or None (auto-locate sidecar).

    Returns VectorField (components=3) or ScalarField (components=1).
    """
    path = Path(path)
    if meta is None:
        meta = _sidecar_for(path)
    if not isinstance(meta, dict):
        meta = read_meta(meta)

    try:
        dims = _check_dims(meta["dims"])
        components = int(meta.get("components", 3))
    except (KeyError, TypeError) as e:
        raise FormatError(f"sidecar missing/invalid fields: {e}") from e
    if components not in (1, 3):
        raise FormatError(f"components must be 1 or 3, got {components}")
    if meta.get("dtype", "f32le") != "f32le":
        raise FormatError(f"unsupported dtype {meta.get('dtype')!r}")
    if meta.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order {meta.get('order')!r}")

    nx, ny, nz = dims
    expected = nx * ny * nz * components * 4
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if len(payload) != expected:
        raise FormatError(
            f"{path}: file is {len(payload)} bytes, expected {expected} for dims {dims} "
            f"x {components} components"
        )
    arr = np.frombuffer(payload, dtype=RAW_DTYPE).reshape(nz, ny, nx, components)
    arr = np.ascontiguousarray(arr.transpose(2, 1, 0, 3))
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains NaN/Inf")
    if components == 3:
        return VectorField(arr)
    return ScalarField(arr[..., 0])


def save_raw(fld, path) -> None:
    """Write a field as .raw (x-fastest, little-endian f32) plus a .json sidecar."""
    path = Path(path)
    data = fld.data
    if isinstance(fld, ScalarField):
        components = 1
        arr = data[..., None]
    else:
        components = 3
        arr = data
    payload = np.ascontiguousarray(arr.transpose(2, 1, 0, 3)).astype(RAW_DTYPE).tobytes()
    meta = {
        "dims": list(fld.dims),
        "components": components,
        "dtype": "f32le",
        "order": "x-fastest",
    }
    try:
        path.write_bytes(payload)
        sidecar_path(path).write_text(json.dumps(meta))
    except OSError as e:
        raise FormatError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def sample_trilinear(fld, x) -> np.ndarray:
    """Trilinear interpolation at normalized coordinate(s) x in [-1,1]^3.

    x may be a single (3,) point or an (n,3) batch. Exact at grid points and for
    fields affine in the coordinates.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if pts.shape[-1] != 3:
        raise UsageError(f"coordinates must have 3 components, got shape {pts.shape}")
    if np.any(np.abs(pts) > 1.0 + 1e-12):
        raise OutOfDomainError("query coordinate outside [-1,1]^3")

    data = fld.data
    scalar = isinstance(fld, ScalarField)
    if scalar:
        data = data[..., None]
    dims = fld.dims

    idx0 = []
    frac = []
    for axis in range(3):
        n = dims[axis]
        if n == 1:
            idx0.append(np.zeros(len(pts), dtype=np.intp))
            frac.append(np.zeros(len(pts)))
            continue
        t = (pts[:, axis] + 1.0) * 0.5 * (n - 1)
        i0 = np.clip(np.floor(t).astype(np.intp), 0, n - 2)
        idx0.append(i0)
        frac.append(t - i0)

    i0, j0, k0 = idx0
    fx, fy, fz = frac
    out = np.zeros((len(pts), data.shape[-1]))
    for di in (0, 1):
        wi = fx if di else 1.0 - fx
        for dj in (0, 1):
            wj = fy if dj else 1.0 - fy
            for dk in (0, 1):
                wk = fz if dk else 1.0 - fz
                ii = np.minimum(i0 + di, dims[0] - 1)
                jj = np.minimum(j0 + dj, dims[1] - 1)
                kk = np.minimum(k0 + dk, dims[2] - 1)
                out += (wi * wj * wk)[:, None] * data[ii, jj, kk]

    if scalar:
        out = out[:, 0]
    if np.asarray(x).ndim == 1:
        return out[0]
    return out


# ---------------------------------------------------------------------------
# Differential operators
# ---------------------------------------------------------------------------

def _require_min_dims(fld, minimum=3):
    if any(d < minimum for d in fld.dims):
        raise ShapeError(f"operator needs at least {minimum} samples per axis, got {fld.dims}")


def jacobian_central(fld: VectorField) -> JacobianField:
    """Central differences at interior voxels, one-sided first order at boundaries."""
    _require_min_dims(fld)
    xs, ys, zs = fld.coords()
    J = np.empty(fld.dims + (3, 3))
    for c, axis_pts in enumerate((xs, ys, zs)):
        g = np.gradient(fld.data, axis_pts, axis=c, edge_order=1)
        J[..., :, c] = g
    return JacobianField(J)


def curl(fld: VectorField) -> VectorField:
    """Curl of the field from central-difference Jacobian entries."""
    J = jacobian_central(fld).data
    out = np.stack(
        [
            J[..., 2, 1] - J[..., 1, 2],
            J[..., 0, 2] - J[..., 2, 0],
            J[..., 1, 0] - J[..., 0, 1],
        ],
        axis=-1,
    )
    return VectorField(out)


def frenet_normal(fld: VectorField) -> tuple[VectorField, VectorField]:
    """Per-voxel principal normal N and binormal B of the flow.

    B = (J V) x V, N = B x V. Both are zero at degenerate voxels.
    """
    J = jacobian_central(fld).data
    V = fld.data
    JV = np.einsum("...rc,...c->...r", J, V)
    B = np.cross(JV, V)
    N = np.cross(B, V)
    dead = fld.degenerate_mask()
    B[dead] = 0.0
    N[dead] = 0.0
    return VectorField(N), VectorField(B)


# ---------------------------------------------------------------------------
# Analytic generators
# ---------------------------------------------------------------------------

def _rigid_rotation(x, y, z, params):
    return np.stack([-y, x, np.zeros_like(z)], axis=-1)


def _abc(x, y, z, params):
    A = params.get("A", 1.0)
    B = params.get("B", 1.0)
    C = params.get("C", 1.0)
    # conventional parameter domain [0, 2*pi]^3 mapped from [-1,1]^3
    px, py, pz = (math.pi * (v + 1.0) for v in (x, y, z))
    return np.stack(
        [
            A * np.sin(pz) + C * np.cos(py),
            B * np.sin(px) + A * np.cos(pz),
            C * np.sin(py) + B * np.cos(px),
        ],
        axis=-1,
    )


def _hill_vortex(x, y, z, params):
    a = params.get("radius", 0.5)
    U = params.get("speed", 1.0)
    r2 = x * x + y * y
    R2 = r2 + z * z
    inside = R2 <= a * a
    a2 = a * a

    # axial and radial/r components; radial_over_r stays finite on the axis
    uz_in = 1.5 * U * (2.0 * r2 / a2 + z * z / a2 - 1.0)
    ur_in = -1.5 * U * z / a2

    R5 = np.maximum(R2, 1e-30) ** 2.5
    uz_out = U * (1.0 - a ** 3 / np.maximum(R2, 1e-30) ** 1.5) + 1.5 * U * r2 * a ** 3 / R5
    ur_out = -1.5 * U * a ** 3 * z / R5

    uz = np.where(inside, uz_in, uz_out)
    ur = np.where(inside, ur_in, ur_out)
    return np.stack([ur * x, ur * y, uz], axis=-1)


def _tornado(x, y, z, params):
    # Crawfis-style tornado, computed on the unit cube [0,1]^3
    t = params.get("time", 0.0)
    small = 1e-11
    xs = (x + 1.0) * 0.5
    ys = (y + 1.0) * 0.5
    zs = (z + 1.0) * 0.5
    xc = 0.5 + 0.1 * np.sin(0.04 * t + 10.0 * zs)
    yc = 0.5 + 0.1 * np.cos(0.03 * t + 3.0 * zs)
    r = 0.1 + 0.4 * zs * zs + 0.025 * zs * np.sin(0.9 * zs)
    r2 = 0.2 + 0.1 * zs
    temp = np.sqrt((ys - yc) ** 2 + (xs - xc) ** 2)
    z0 = 0.1 * (0.1 - temp * zs)
    z0 = np.maximum(z0, 0.0)
    temp = np.sqrt(temp * temp + z0 * z0)
    z0 = (r + r2 - temp) * 0.1 / (temp + small)
    z0 = z0 / np.exp((temp - r) / (r2 + small))
    return np.stack([z0 * (yc - ys), z0 * (xs - xc), z0 * z0], axis=-1)


_GENERATORS = {
    "rigid_rotation": _rigid_rotation,
    "abc": _abc,
    "hill_vortex": _hill_vortex,
    "tornado": _tornado,
}

ANALYTIC_FIELDS = tuple(sorted(_GENERATORS))


def analytic_velocity(name: str, points: np.ndarray, params=None) -> np.ndarray:
    """Evaluate a named analytic field at arbitrary normalized points (n,3)."""
    if name not in _GENERATORS:
        raise UsageError(f"unknown analytic field {name!r}; choose from {ANALYTIC_FIELDS}")
    pts = np.asarray(points, dtype=np.float64)
    params = dict(params or {})
    return _GENERATORS[name](pts[..., 0], pts[..., 1], pts[..., 2], params)


def gen_analytic(name: str, dims, params=None) -> VectorField:
    """Sample a named analytic field at the voxel centers of a dims grid."""
    dims = _check_dims(dims)
    pts = grid_coordinates(dims)
    vals = analytic_velocity(name, pts, params)
    nx, ny, nz = dims
    data = vals.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return VectorField(np.ascontiguousarray(data.astype(np.float32)))
