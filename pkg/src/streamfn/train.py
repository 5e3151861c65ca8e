"""Loss functions, voxel-batch sampling, Adam with step-decay schedule, rakes,
and the training loop producing a StreamNet."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import net as netmod
from .errors import DataError, UsageError
from .volume import DEGENERATE_SPEED, VectorField, frenet_normal

LOSS_KINDS = ("perp", "pss", "perp+seeds", "pss+seeds")

DEFAULT_LR = 5e-5
LR_DECAY_EVERY = 3333
LR_DECAY_FACTOR = 10.0

# Default batch size: 1% of the voxel count, clamped so that small volumes still
# get a useful batch and a 128^3 volume lands on 10k samples per iteration.
BATCH_MIN = 1024
BATCH_MAX = 10_000
# Hard upper bound accepted for explicitly configured batch sizes.
BATCH_LIMIT = 150_000


def default_batch_size(num_voxels: int) -> int:
    return int(min(max(num_voxels // 100, BATCH_MIN), BATCH_MAX))


@dataclass(frozen=True)
class RakeSpec:
    """A seeding rake: a segment between two points or a circle, in [-1,1]^3."""

    kind: str  # "segment" | "circle"
    start: tuple = None  # segment endpoints
    end: tuple = None
    center: tuple = None  # circle parameters
    radius: float = None
    normal: tuple = None
    sample_count: int = 1024

    def __post_init__(self):
        for name in ("start", "end", "center", "normal"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if self.kind not in ("segment", "circle"):
            raise UsageError(f"rake kind must be 'segment' or 'circle', got {self.kind!r}")
        if self.sample_count < 1:
            raise UsageError("rake sample_count must be >= 1")
        if self.kind == "segment" and (self.start is None or self.end is None):
            raise UsageError("segment rake needs start and end points")
        if self.kind == "circle" and (self.center is None or self.radius is None):
            raise UsageError("circle rake needs center and radius")

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return d

    @staticmethod
    def from_json(d: dict) -> "RakeSpec":
        return RakeSpec(**d)


def sample_rake(spec: RakeSpec) -> np.ndarray:
    """Evenly spaced sample points along the rake, fixed once per training run."""
    n = spec.sample_count
    if spec.kind == "segment":
        a = np.asarray(spec.start, dtype=np.float64)
        b = np.asarray(spec.end, dtype=np.float64)
        if n == 1:
            pts = (a + b)[None, :] / 2.0
        else:
            t = np.linspace(0.0, 1.0, n)[:, None]
            pts = a[None, :] * (1.0 - t) + b[None, :] * t
    else:
        c = np.asarray(spec.center, dtype=np.float64)
        nrm = np.asarray(spec.normal if spec.normal is not None else (0.0, 0.0, 1.0), dtype=np.float64)
        nn = np.linalg.norm(nrm)
        if nn < 1e-12:
            raise UsageError("circle rake normal must be nonzero")
        nrm = nrm / nn
        helper = np.array([1.0, 0.0, 0.0]) if abs(nrm[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(nrm, helper)
        u /= np.linalg.norm(u)
        v = np.cross(nrm, u)
        theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)[:, None]
        pts = c[None, :] + spec.radius * (np.cos(theta) * u[None, :] + np.sin(theta) * v[None, :])
    if np.any(np.abs(pts) > 1.0 + 1e-12):
        raise UsageError("rake extends outside the [-1,1]^3 domain")
    return pts


@dataclass
class TrainConfig:
    loss_kind: str = "perp"
    iterations: int = 10_000
    batch_size: int | None = None  # None -> default_batch_size(field)
    lr0: float = DEFAULT_LR
    seed: int = 0
    rake: RakeSpec | None = None
    seeds_weight: float = 1.0
    signed_seeds: bool = False  # literal signed rake mean instead of mean |f(s)|
    normalize_vectors: bool = False  # unit-normalize V before the orthogonality loss
    hidden_layers: int = 4
    width: int = 512
    first_layer_frequency: float = 30.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise UsageError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.iterations < 1:
            raise UsageError("iterations must be >= 1")
        if self.batch_size is not None and not (1 <= self.batch_size <= BATCH_LIMIT):
            raise UsageError(f"batch_size must be in [1, {BATCH_LIMIT}]")
        if self.seeds_weight < 0:
            raise UsageError("seeds_weight must be >= 0")
        if self.uses_seeds and self.rake is None:
            raise UsageError(f"loss {self.loss_kind!r} needs a rake")

    @property
    def uses_seeds(self) -> bool:
        return self.loss_kind.endswith("+seeds")

    @property
    def uses_pss(self) -> bool:
        return self.loss_kind.startswith("pss")

    def architecture(self) -> netmod.Architecture:
        return netmod.Architecture(
            hidden_layers=self.hidden_layers,
            width=self.width,
            first_layer_frequency=self.first_layer_frequency,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["rake"] = self.rake.to_json() if self.rake is not None else None
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("rake") is not None:
            d["rake"] = RakeSpec.from_json(d["rake"])
        return TrainConfig(**d)


# ---------------------------------------------------------------------------
# Losses (values and cotangents w.r.t. the gradient batch / value batch)
# ---------------------------------------------------------------------------

def loss_perp(grads, vectors) -> float:
    """Mean |grad f . V| over the batch."""
    grads = np.asarray(grads)
    vectors = np.asarray(vectors)
    if len(grads) == 0:
        raise UsageError("empty batch")
    if grads.shape != vectors.shape:
        raise UsageError("gradient and vector batches must have matching shapes")
    return float(np.mean(np.abs(np.einsum("nj,nj->n", grads, vectors))))


def _loss_perp_with_cotangent(grads, vectors):
    d = np.einsum("nj,nj->n", grads, vectors)
    value = float(np.mean(np.abs(d)))
    # subgradient 0 exactly at the |.| kink
    dG = (np.sign(d)[:, None] * vectors) / len(d)
    return value, dG


def loss_pss(grads, normals, return_excluded=False):
    """Mean of 1 - cos^2(angle between grad f and N); near-zero entries excluded."""
    grads = np.asarray(grads, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if len(grads) == 0:
        raise UsageError("empty batch")
    if grads.shape != normals.shape:
        raise UsageError("gradient and normal batches must have matching shapes")
    keep = (np.linalg.norm(grads, axis=1) >= DEGENERATE_SPEED) & (
        np.linalg.norm(normals, axis=1) >= DEGENERATE_SPEED
    )
    excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise UsageError("all batch entries degenerate for the flow-curvature loss")
    g, n = grads[keep], normals[keep]
    c = np.einsum("nj,nj->n", g, n)
    value = float(np.mean(1.0 - c * c / (np.einsum("nj,nj->n", g, g) * np.einsum("nj,nj->n", n, n))))
    if return_excluded:
        return value, excluded
    return value


def _loss_pss_with_cotangent(grads, normals):
    keep = (np.linalg.norm(grads, axis=1) >= DEGENERATE_SPEED) & (
        np.linalg.norm(normals, axis=1) >= DEGENERATE_SPEED
    )
    if not np.any(keep):
        raise UsageError("all batch entries degenerate for the flow-curvature loss")
    kept = int(np.sum(keep))
    g = np.where(keep[:, None], grads, 1.0)  # placeholder rows are zeroed below
    n = normals
    a = np.einsum("nj,nj->n", g, g)
    b = np.maximum(np.einsum("nj,nj->n", n, n), 1e-300)
    c = np.einsum("nj,nj->n", g, n)
    value = float(np.sum((1.0 - c * c / (a * b))[keep]) / kept)
    dG = -(2.0 * c / (a * b))[:, None] * n + (2.0 * c * c / (a * a * b))[:, None] * g
    dG = np.where(keep[:, None], dG, 0.0) / kept
    return value, dG.astype(grads.dtype)


def loss_seeds(stream_net, seeds, signed=False) -> float:
    """Rake loss: mean |f(s)| over the seed set (signed mean behind the flag)."""
    seeds = np.asarray(seeds)
    if len(seeds) == 0:
        raise UsageError("empty seed set")
    vals = netmod.forward(stream_net, seeds)
    if signed:
        return float(np.mean(vals))
    return float(np.mean(np.abs(vals)))


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

class _FieldSamples:
    """Flattened non-degenerate voxel coordinates/vectors for uniform sampling."""

    def __init__(self, fld: VectorField, normals: VectorField | None = None):
        coords = fld.voxel_coordinates()
        vecs = fld.flat_vectors()
        keep = np.linalg.norm(vecs, axis=1) >= DEGENERATE_SPEED
        if not np.any(keep):
            raise DataError("all voxels degenerate: cannot sample a training batch")
        self.coords = coords[keep]
        self.vectors = vecs[keep]
        self.normals = normals.flat_vectors()[keep] if normals is not None else None
        self.count = int(np.sum(keep))


def sample_batch(fld: VectorField, rng: np.random.Generator, b: int):
    """Draw b voxel centers uniformly with replacement, skipping degenerate voxels.

    Returns (P, W): normalized coordinates and the stored vectors (no interpolation).
    """
    if b < 1:
        raise UsageError("batch size must be >= 1")
    samples = _FieldSamples(fld)
    idx = rng.integers(0, samples.count, size=b)
    return samples.coords[idx], samples.vectors[idx]


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to `params` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("parameter/gradient/state lengths differ")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise UsageError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_at(iteration: int, lr0: float = DEFAULT_LR) -> float:
    """Step-decay schedule: divide by 10 every 3,333 iterations."""
    if iteration < 0:
        raise UsageError("iteration must be >= 0")
    return lr0 * LR_DECAY_FACTOR ** (-(iteration // LR_DECAY_EVERY))


# ---------------------------------------------------------------------------
# Parameter gradients of the composed training losses
# ---------------------------------------------------------------------------

def param_gradients(stream_net, points, vectors=None, normals=None, rake_points=None,
                    loss_kind="perp", seeds_weight=1.0, signed_seeds=False):
    """Gradients of the selected loss w.r.t. every network parameter.

    Returns (loss_parts, grads) where loss_parts maps component name -> value and
    grads aligns with stream_net.parameters().
    """
    if loss_kind not in LOSS_KINDS:
        raise UsageError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    points = np.asarray(points, dtype=stream_net.dtype)
    if len(points) == 0:
        raise UsageError("empty batch")

    f, g, tape = netmod._forward_tape(stream_net, points, with_tangent=True)
    parts = {}
    if loss_kind.startswith("perp"):
        if vectors is None:
            raise UsageError("perp loss needs the vector batch")
        value, dG = _loss_perp_with_cotangent(g, np.asarray(vectors, dtype=g.dtype))
        parts["perp"] = value
    else:
        if normals is None:
            raise UsageError("pss loss needs the normal batch")
        value, dG = _loss_pss_with_cotangent(g, np.asarray(normals, dtype=np.float64))
        parts["pss"] = value
    grads = netmod.backprop(stream_net, tape, np.zeros(len(f), dtype=g.dtype), dG)

    if loss_kind.endswith("+seeds"):
        if rake_points is None or len(rake_points) == 0:
            raise UsageError("seeds loss needs rake points")
        S = np.asarray(rake_points, dtype=stream_net.dtype)
        fs, _, stape = netmod._forward_tape(stream_net, S, with_tangent=False)
        if signed_seeds:
            parts["seeds"] = float(np.mean(fs))
            dfs = np.full(len(fs), 1.0 / len(fs), dtype=fs.dtype)
        else:
            parts["seeds"] = float(np.mean(np.abs(fs)))
            dfs = np.sign(fs) / len(fs)
        sgrads = netmod.backprop(stream_net, stape, dfs.astype(fs.dtype), None)
        for gacc, gs in zip(grads, sgrads):
            gacc += seeds_weight * gs
    return parts, grads


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(fld: VectorField, config: TrainConfig, progress=None):
    """Train a network on the field per the config. Deterministic given (field, config).

    Returns (StreamNet, history) where history is a list of per-iteration dicts.
    """
    rng = np.random.default_rng(config.seed)
    stream_net = netmod.init(config.architecture(), config.seed)
    params = stream_net.parameters()
    state = AdamState.for_params(params)

    normals = None
    if config.uses_pss:
        normals, _ = frenet_normal(fld)
    samples = _FieldSamples(fld, normals)
    b = config.batch_size if config.batch_size is not None else default_batch_size(fld.num_voxels)
    rake_points = sample_rake(config.rake) if config.uses_seeds else None

    history = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        idx = rng.integers(0, samples.count, size=b)
        P = samples.coords[idx].astype(stream_net.dtype)
        kwargs = {}
        if config.uses_pss:
            kwargs["normals"] = samples.normals[idx]
        else:
            vecs = samples.vectors[idx]
            if config.normalize_vectors:
                vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
            kwargs["vectors"] = vecs
        parts, grads = param_gradients(
            stream_net, P, rake_points=rake_points, loss_kind=config.loss_kind,
            seeds_weight=config.seeds_weight, signed_seeds=config.signed_seeds, **kwargs,
        )
        total = sum(parts.values()) if "seeds" not in parts else (
            parts.get("perp", parts.get("pss", 0.0)) + config.seeds_weight * parts["seeds"]
        )
        lr = lr_at(it, config.lr0)
        if not np.isfinite(total):
            raise DataError(
                f"non-finite loss at iteration {it} (lr={lr:g}, parts={parts})"
            )
        adam_step(params, grads, state, lr)
        row = {"iteration": it, "lr": lr, "loss": total,
               "loss_perp": parts.get("perp", ""), "loss_pss": parts.get("pss", ""),
               "loss_seeds": parts.get("seeds", ""),
               "wall_time": time.perf_counter() - t0}
        history.append(row)
        if progress is not None and (it % 100 == 0 or it == config.iterations - 1):
            progress(row)
    return stream_net, history


HISTORY_COLUMNS = ["iteration", "lr", "loss", "loss_perp", "loss_pss", "loss_seeds", "wall_time"]


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)


def parse_rake(text: str) -> RakeSpec:
    """Parse a rake flag: inline `segment:x1,y1,z1,x2,y2,z2`, inline
    `circle:cx,cy,cz,r[,nx,ny,nz]`, or a JSON object/file path."""
    text = text.strip()
    if text.startswith("segment:") or text.startswith("circle:"):
        kind, rest = text.split(":", 1)
        try:
            nums = [float(v) for v in rest.split(",")]
        except ValueError as e:
            raise UsageError(f"bad rake numbers in {text!r}") from e
        if kind == "segment":
            if len(nums) != 6:
                raise UsageError("segment rake needs 6 numbers: x1,y1,z1,x2,y2,z2")
            return RakeSpec(kind="segment", start=tuple(nums[:3]), end=tuple(nums[3:]))
        if len(nums) not in (4, 7):
            raise UsageError("circle rake needs cx,cy,cz,r[,nx,ny,nz]")
        normal = tuple(nums[4:]) if len(nums) == 7 else None
        return RakeSpec(kind="circle", center=tuple(nums[:3]), radius=nums[3], normal=normal)
    try:
        if text.startswith("{"):
            return RakeSpec.from_json(json.loads(text))
        with open(text) as fh:
            return RakeSpec.from_json(json.load(fh))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise UsageError(f"cannot parse rake spec {text!r}: {e}") from e
