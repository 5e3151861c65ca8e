"""Sinusoidal residual MLP f: [-1,1]^3 -> R with analytic input gradients.

The forward pass optionally carries a 3-column tangent (d activation / d input) so
the spatial gradient of the output is available in closed form.  Reverse
accumulation over this tangent-augmented forward yields parameter gradients of
losses that depend on the spatial gradient.

Layer stack: one input sine layer (3 -> width), hidden sine layers grouped into
residual blocks of two (block output = block(input) + input), and a linear head
(width -> 1).  All sine layers compute sin(omega * (W x + b)).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, UsageError

_MAGIC = b"SFNMLP01"


@dataclass(frozen=True)
class Architecture:
    hidden_layers: int = 4
    width: int = 512
    first_layer_frequency: float = 30.0

    def __post_init__(self):
        if self.hidden_layers < 2 or self.hidden_layers % 2 != 0:
            raise UsageError(
                f"hidden_layers must be a positive even integer, got {self.hidden_layers}"
            )
        if self.width < 1:
            raise UsageError(f"width must be >= 1, got {self.width}")
        if self.first_layer_frequency <= 0:
            raise UsageError("first_layer_frequency must be positive")

    @property
    def blocks(self) -> int:
        return self.hidden_layers // 2

    def layer_shapes(self):
        """(weight_shape, bias_shape) per layer: input sine, hidden sines, head."""
        w = self.width
        shapes = [((w, 3), (w,))]
        shapes += [((w, w), (w,))] * self.hidden_layers
        shapes.append(((1, w), (1,)))
        return shapes


class StreamNet:
    """Parameters of the sinusoidal residual MLP. Immutable by convention after training."""

    def __init__(self, architecture: Architecture, weights, biases, seed=None):
        expected = architecture.layer_shapes()
        if len(weights) != len(expected) or len(biases) != len(expected):
            raise UsageError("parameter count does not match architecture")
        for (ws, bs), W, b in zip(expected, weights, biases):
            if W.shape != ws or b.shape != bs:
                raise UsageError(f"parameter shape mismatch: {W.shape}/{b.shape} vs {ws}/{bs}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DataError("non-finite network parameters")
        self.architecture = architecture
        self.weights = list(weights)
        self.biases = list(biases)
        self.seed = seed

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self):
        """Flat list [W0, b0, W1, b1, ...] referencing the live arrays."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "StreamNet":
        return StreamNet(
            self.architecture,
            [W.astype(dtype) for W in self.weights],
            [b.astype(dtype) for b in self.biases],
            seed=self.seed,
        )

    def copy(self) -> "StreamNet":
        return self.astype(self.dtype)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def with_flat_parameters(self, flat: np.ndarray) -> "StreamNet":
        flat = np.asarray(flat)
        if flat.size != self.num_parameters():
            raise UsageError("flat parameter vector has wrong length")
        weights, biases = [], []
        pos = 0
        for W, b in zip(self.weights, self.biases):
            weights.append(flat[pos:pos + W.size].reshape(W.shape).astype(self.dtype))
            pos += W.size
            biases.append(flat[pos:pos + b.size].reshape(b.shape).astype(self.dtype))
            pos += b.size
        return StreamNet(self.architecture, weights, biases, seed=self.seed)


def init(architecture: Architecture, seed: int, dtype=np.float32) -> StreamNet:
    """Deterministic sinusoidal-network initialization.

    Input layer weights uniform(-1/3, 1/3); hidden sine layers uniform within
    +-sqrt(6/width)/omega; head weights uniform(+-1/sqrt(width)); biases
    uniform(+-1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    omega = architecture.first_layer_frequency
    weights, biases = [], []
    for i, ((wr, wc), (bn,)) in enumerate(architecture.layer_shapes()):
        fan_in = wc
        if i == 0:
            bound = 1.0 / fan_in
        elif i == len(architecture.layer_shapes()) - 1:
            bound = 1.0 / np.sqrt(fan_in)
        else:
            bound = np.sqrt(6.0 / fan_in) / omega
        weights.append(rng.uniform(-bound, bound, size=(wr, wc)).astype(dtype))
        b_bound = 1.0 / float(np.sqrt(fan_in))
        biases.append(rng.uniform(-b_bound, b_bound, size=(bn,)).astype(dtype))
    return StreamNet(architecture, weights, biases, seed=seed)


# ---------------------------------------------------------------------------
# Forward / tangent-augmented forward
# ---------------------------------------------------------------------------

def _as_batch(x, dtype):
    pts = np.asarray(x, dtype=dtype)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise UsageError(f"input coordinates must have 3 components, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DataError("non-finite input coordinates")
    return pts, single


def _forward_tape(net: StreamNet, X: np.ndarray, with_tangent: bool):
    """Run the network on batch X (n,3).

    Returns (f (n,), grad (n,3) or None, tape).  The tangent T has layout
    (3, n, width): T[j] = d h / d x_j for every unit.
    """
    arch = net.architecture
    omega = arch.first_layer_frequency
    Ws, bs = net.weights, net.biases
    tape = {"X": X, "layers": []}

    # input sine layer
    z = omega * (X @ Ws[0].T + bs[0])
    cz = np.cos(z)
    h = np.sin(z)
    T = None
    if with_tangent:
        # T[j,n,i] = cos(z[n,i]) * omega * W0[i,j]
        T = cz[None, :, :] * (omega * Ws[0].T)[:, None, :]
    tape["layers"].append({"kind": "input", "z": z, "h_out": h, "T_out": T})

    li = 1
    for _ in range(arch.blocks):
        h_block_in, T_block_in = h, T
        for _ in range(2):
            z = omega * (h @ Ws[li].T + bs[li])
            cz = np.cos(z)
            h_new = np.sin(z)
            rec = {"kind": "sine", "index": li, "z": z, "h_in": h, "T_in": T}
            if with_tangent:
                width = T.shape[-1]
                Tz = (omega * (T.reshape(-1, width) @ Ws[li].T)).reshape(T.shape)
                rec["Tz"] = Tz
                T = cz[None, :, :] * Tz
            rec["h_out"] = h_new
            rec["T_out"] = T
            tape["layers"].append(rec)
            h = h_new
            li += 1
        h = h + h_block_in
        if with_tangent:
            T = T + T_block_in
        tape["layers"].append({"kind": "residual_add"})

    f = (h @ Ws[-1].T + bs[-1])[:, 0]
    tape["layers"].append({"kind": "head", "h_in": h, "T_in": T})
    grad = None
    if with_tangent:
        grad = (T @ Ws[-1][0]).T  # (n,3)
    return f, grad, tape


def forward(net: StreamNet, x) -> np.ndarray:
    """Evaluate f at point(s) x. Returns a scalar for a single point, (n,) for a batch."""
    X, single = _as_batch(x, net.dtype)
    f, _, _ = _forward_tape(net, X, with_tangent=False)
    return f[0] if single else f


def forward_with_grad(net: StreamNet, x):
    """Evaluate (f, grad f) at point(s) x; grad is the exact analytic spatial gradient."""
    X, single = _as_batch(x, net.dtype)
    f, g, _ = _forward_tape(net, X, with_tangent=True)
    if single:
        return f[0], g[0]
    return f, g


# ---------------------------------------------------------------------------
# Reverse accumulation over the tangent-augmented forward
# ---------------------------------------------------------------------------

def backprop(net: StreamNet, tape, df, dgrad=None):
    """Parameter gradients of a scalar loss with cotangents df = dL/df (n,)
    and dgrad = dL/d(grad f) (n,3) against a tape from the matching forward.

    Returns gradients aligned with net.parameters().
    """
    arch = net.architecture
    omega = arch.first_layer_frequency
    Ws = net.weights
    dtype = df.dtype
    gW = [np.zeros_like(W, dtype=dtype) for W in net.weights]
    gb = [np.zeros_like(b, dtype=dtype) for b in net.biases]

    layers = tape["layers"]
    head = layers[-1]
    h_L, T_L = head["h_in"], head["T_in"]
    with_tangent = dgrad is not None
    n = len(df)

    w_head = Ws[-1][0]
    gW[-1][0] += df @ h_L
    gb[-1][0] += df.sum()
    dh = df[:, None] * w_head[None, :]
    dT = None
    if with_tangent:
        # f-grad g[n,j] = sum_i w_head[i] T[j,n,i]
        width = T_L.shape[-1]
        gW[-1][0] += dgrad.T.reshape(-1) @ T_L.reshape(-1, width)
        dT = dgrad.T[:, :, None] * w_head[None, None, :]

    li = len(net.weights) - 2  # current sine-layer weight index
    for rec in reversed(layers[:-1]):
        kind = rec["kind"]
        if kind == "residual_add":
            # adjoint of h = h_sine_out + h_block_in flows to both branches;
            # stash the skip adjoint and add it back when the block input reappears
            rec_skip = (dh.copy(), dT.copy() if with_tangent else None)
            # find block input two sine layers back: handled via pending list
            pending = tape.setdefault("_pending_skip", [])
            pending.append({"count": 2, "dh": rec_skip[0], "dT": rec_skip[1]})
            continue
        if kind == "sine":
            z = rec["z"]
            cz, sz = np.cos(z), np.sin(z)
            W = Ws[li]
            dz = dh * cz
            if with_tangent:
                Tz = rec["Tz"]
                width = z.shape[-1]
                dTz = dT * cz[None, :, :]
                dz -= sz * (dT * Tz).sum(axis=0)
                gW[li] += omega * (dTz.reshape(-1, width).T @ rec["T_in"].reshape(-1, width))
                dT = (omega * (dTz.reshape(-1, width) @ W)).reshape(dTz.shape)
            gW[li] += omega * dz.T @ rec["h_in"]
            gb[li] += omega * dz.sum(axis=0)
            dh = omega * dz @ W
            li -= 1
            # a finished sine layer consumes one hop of any pending skip connections
            for p in tape.get("_pending_skip", []):
                p["count"] -= 1
                if p["count"] == 0:
                    dh = dh + p["dh"]
                    if with_tangent:
                        dT = dT + p["dT"]
            tape["_pending_skip"] = [p for p in tape.get("_pending_skip", []) if p["count"] > 0]
            continue
        if kind == "input":
            z = rec["z"]
            cz, sz = np.cos(z), np.sin(z)
            W0 = Ws[0]
            X = tape["X"]
            dz = dh * cz
            if with_tangent:
                # T[j,n,i] = cos(z) * omega * W0[i,j]
                dz -= sz * omega * (dT * W0.T[:, None, :]).sum(axis=0)
                gW[0] += omega * (dT * cz[None, :, :]).sum(axis=1).T
            gW[0] += omega * dz.T @ X
            gb[0] += omega * dz.sum(axis=0)
            continue
        raise AssertionError(kind)

    grads = []
    for W, b in zip(gW, gb):
        grads.extend([W, b])
    return grads


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def serialize(net: StreamNet, path, provenance=None) -> None:
    """Write the versioned binary model container plus a JSON manifest alongside."""
    path = Path(path)
    header = {
        "version": 1,
        "hidden_layers": net.architecture.hidden_layers,
        "width": net.architecture.width,
        "first_layer_frequency": net.architecture.first_layer_frequency,
        "seed": net.seed,
        "dtype": np.dtype(net.dtype).name,
    }
    hdr = json.dumps(header).encode()
    payload = b"".join(
        np.ascontiguousarray(p).astype(p.dtype.newbyteorder("<")).tobytes()
        for p in net.parameters()
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        fh.write(payload)

    manifest = dict(header)
    manifest["parameters"] = net.num_parameters()
    if provenance:
        manifest["provenance"] = provenance
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))


def deserialize(path) -> StreamNet:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from e
    if len(blob) < len(_MAGIC) + 4 or blob[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a model file (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(_MAGIC))
    off = len(_MAGIC) + 4
    if len(blob) < off + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + hlen])
        arch = Architecture(
            hidden_layers=header["hidden_layers"],
            width=header["width"],
            first_layer_frequency=header["first_layer_frequency"],
        )
        dtype = np.dtype(header["dtype"])
    except (json.JSONDecodeError, KeyError, TypeError, UsageError) as e:
        raise FormatError(f"{path}: invalid header: {e}") from e
    off += hlen

    weights, biases = [], []
    for (ws, bs) in arch.layer_shapes():
        for shape, dest in ((ws, weights), (bs, biases)):
            nbytes = int(np.prod(shape)) * dtype.itemsize
            if len(blob) < off + nbytes:
                raise FormatError(f"{path}: truncated parameter payload")
            arr = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape)), offset=off)
            dest.append(arr.astype(dtype).reshape(shape))
            off += nbytes
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    try:
        return StreamNet(arch, weights, biases, seed=header.get("seed"))
    except DataError as e:
        raise FormatError(f"{path}: {e}") from e
