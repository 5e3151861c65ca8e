"""Orthogonality-error metric and volumes, RK4 streamline tracing, stream-function
constancy along streamlines, and the grid-resampling fidelity study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import net as netmod
from .errors import DataError, OutOfDomainError, UsageError
from .volume import ScalarField, VectorField, sample_trilinear, grid_coordinates

EVAL_CHUNK = 65536
STAGNATION_SPEED = 1e-9
RANGE_SAMPLE_RES = 64  # fixed grid used for the global f-range, so reports are comparable


def _eval_values(f_or_net, pts: np.ndarray) -> np.ndarray:
    """Evaluate f on (n,3) points; accepts a StreamNet or a plain callable."""
    if isinstance(f_or_net, netmod.StreamNet):
        out = np.empty(len(pts))
        for lo in range(0, len(pts), EVAL_CHUNK):
            chunk = pts[lo:lo + EVAL_CHUNK].astype(f_or_net.dtype)
            out[lo:lo + EVAL_CHUNK] = netmod.forward(f_or_net, chunk)
        return out
    res = f_or_net(pts)
    if isinstance(res, tuple):  # (f, grad) oracle used where only f is needed
        res = res[0]
    return np.asarray(res, dtype=np.float64)


def _eval_with_grad(f_or_net, pts: np.ndarray):
    if isinstance(f_or_net, netmod.StreamNet):
        vals = np.empty(len(pts))
        grads = np.empty((len(pts), 3))
        for lo in range(0, len(pts), EVAL_CHUNK):
            chunk = pts[lo:lo + EVAL_CHUNK].astype(f_or_net.dtype)
            f, g = netmod.forward_with_grad(f_or_net, chunk)
            vals[lo:lo + EVAL_CHUNK] = f
            grads[lo:lo + EVAL_CHUNK] = g
        return vals, grads
    f, g = f_or_net(pts)
    return np.asarray(f, dtype=np.float64), np.asarray(g, dtype=np.float64)


@dataclass(frozen=True)
class ErrStats:
    """Aggregate orthogonality error over a volume, in degrees."""

    median: float
    mean: float
    max: float
    masked_voxel_count: int
    total_voxels: int

    def to_json(self) -> dict:
        return {
            "median_deg": self.median,
            "mean_deg": self.mean,
            "max_deg": self.max,
            "masked_voxels": self.masked_voxel_count,
            "total_voxels": self.total_voxels,
        }


def err_perp_point(grad, v) -> float:
    """Angle (radians) between grad f and the plane perpendicular to V.

    Returns NaN (masked sentinel) for degenerate inputs.
    """
    grad = np.asarray(grad, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ng, nv = np.linalg.norm(grad), np.linalg.norm(v)
    if ng < 1e-12 or nv < 1e-12:
        return float("nan")
    cos = np.clip(np.dot(grad, v) / (ng * nv), -1.0, 1.0)
    return abs(np.pi / 2.0 - np.arccos(cos))


def _err_batch_rad(grads, vecs):
    ng = np.linalg.norm(grads, axis=1)
    nv = np.linalg.norm(vecs, axis=1)
    keep = (ng >= 1e-12) & (nv >= 1e-12)
    err = np.full(len(grads), np.nan)
    cos = np.clip(
        np.einsum("nj,nj->n", grads[keep], vecs[keep]) / (ng[keep] * nv[keep]), -1.0, 1.0
    )
    err[keep] = np.abs(np.pi / 2.0 - np.arccos(cos))
    return err


def err_volume(f_or_net, fld: VectorField):
    """Per-voxel orthogonality error (degrees) plus aggregate stats.

    Spatial gradients are evaluated analytically from the network, not by
    finite differences.
    """
    pts = fld.voxel_coordinates()
    _, grads = _eval_with_grad(f_or_net, pts)
    err_rad = _err_batch_rad(grads, fld.flat_vectors().astype(np.float64))
    err_deg = np.degrees(err_rad)
    masked = int(np.sum(np.isnan(err_deg)))
    total = len(err_deg)
    if masked == total:
        raise DataError("error volume is fully masked (degenerate gradients or vectors)")
    valid = err_deg[~np.isnan(err_deg)]
    nx, ny, nz = fld.dims
    grid = np.ascontiguousarray(err_deg.reshape(nz, ny, nx).transpose(2, 1, 0))
    stats = ErrStats(
        median=float(np.median(valid)),
        mean=float(np.mean(valid)),
        max=float(np.max(valid)),
        masked_voxel_count=masked,
        total_voxels=total,
    )
    return ScalarField(grid, allow_nan=True), stats


# ---------------------------------------------------------------------------
# Streamlines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Streamline:
    points: np.ndarray  # (m,3)
    step_size: float
    termination: str  # "max_steps" | "left_domain" | "stagnation"


def trace_streamline(fld: VectorField, seed, h: float, max_steps: int) -> Streamline:
    """Classical RK4 integration with trilinear velocity sampling."""
    seed = np.asarray(seed, dtype=np.float64)
    if h <= 0:
        raise UsageError("step size must be positive")
    if np.any(np.abs(seed) > 1.0 + 1e-12):
        raise UsageError("streamline seed outside the [-1,1]^3 domain")

    pts = [seed]
    x = seed
    termination = "max_steps"
    for _ in range(max_steps):
        try:
            k1 = sample_trilinear(fld, x)
            if np.linalg.norm(k1) < STAGNATION_SPEED:
                termination = "stagnation"
                break
            k2 = sample_trilinear(fld, x + 0.5 * h * k1)
            k3 = sample_trilinear(fld, x + 0.5 * h * k2)
            k4 = sample_trilinear(fld, x + h * k3)
            x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if np.any(np.abs(x_new) > 1.0):
                termination = "left_domain"
                break
        except OutOfDomainError:
            termination = "left_domain"
            break
        pts.append(x_new)
        x = x_new
    return Streamline(points=np.asarray(pts), step_size=h, termination=termination)


def global_value_range(f_or_net, resolution: int = RANGE_SAMPLE_RES) -> float:
    """Span of f over a fixed uniform grid sample of the domain."""
    pts = grid_coordinates((resolution, resolution, resolution))
    vals = _eval_values(f_or_net, pts)
    return float(np.max(vals) - np.min(vals))


def constancy_check(f_or_net, streamlines) -> dict:
    """How constant f stays along each streamline, relative to the global f-range."""
    if len(streamlines) == 0:
        raise UsageError("need at least one streamline")
    frange = global_value_range(f_or_net)
    if frange < 1e-9:
        raise DataError("global f-range is degenerate (constant stream function)")
    per_line = []
    for sl in streamlines:
        vals = _eval_values(f_or_net, np.asarray(sl.points, dtype=np.float64))
        variation = float(np.max(np.abs(vals - vals[0]))) if len(vals) > 1 else 0.0
        per_line.append(variation / frange)
    per_line = np.asarray(per_line)
    return {
        "per_line": per_line.tolist(),
        "median": float(np.median(per_line)),
        "max": float(np.max(per_line)),
        "f_range": frange,
    }


# ---------------------------------------------------------------------------
# Resampling fidelity
# ---------------------------------------------------------------------------

def resample_fidelity(f_or_net, resolutions, probe_count: int, rng) -> dict:
    """Compare direct evaluation vs trilinear interpolation of sampled grids.

    For each resolution r the network is sampled on an r^3 grid; at probe_count
    random points the trilinear reconstruction is compared against the direct
    evaluation. Deviations are normalized by the global f-range.
    """
    resolutions = list(resolutions)
    if not resolutions:
        raise UsageError("need at least one resolution")
    if probe_count < 1:
        raise UsageError("probe_count must be >= 1")
    probes = rng.uniform(-1.0, 1.0, size=(probe_count, 3))
    direct = _eval_values(f_or_net, probes)
    frange = global_value_range(f_or_net)
    if frange < 1e-9:
        frange = 1.0
    report = {}
    for res in resolutions:
        grid = _sample_scalar_grid(f_or_net, (res, res, res))
        interp = sample_trilinear(grid, probes)
        dev = np.abs(interp - direct) / frange
        report[int(res)] = {"mean": float(np.mean(dev)), "max": float(np.max(dev))}
    return report


def _sample_scalar_grid(f_or_net, dims) -> ScalarField:
    pts = grid_coordinates(dims)
    vals = _eval_values(f_or_net, pts)
    nx, ny, nz = dims
    return ScalarField(np.ascontiguousarray(vals.reshape(nz, ny, nx).transpose(2, 1, 0)))
