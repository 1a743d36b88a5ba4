"""3D Gaussian splats and the per-point MLP attribute decoder.

The decoder maps ``concat(x, f)`` (point plus triplane feature) through a
small dense network to a raw vector laid out as::

    [offset(3) | opacity(1) | log-scale(3) | quaternion(4) | sh((L+1)^2 * 3)]

The raw vector is then mapped to valid attributes: tanh-bounded offset from
the query point, sigmoid opacity, exp scale clamped to [1e-6, max_scale],
normalized quaternion (identity when the raw quaternion vanishes) and raw
SH coefficients (coefficient-major, RGB-minor).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Rotation
from .plyio import read_ply, write_ply

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)

MIN_SCALE = 1e-6
ZERO_QUAT_EPS = 1e-12
ACTIVATIONS = ("relu", "linear", "tanh")


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis (Condon-Shortley phase, graphics ordering) -> (M, (L+1)^2)."""
    if degree < 0 or degree > 2:
        raise ValueError("SH degree must be 0, 1 or 2")
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    cols = [np.full(len(d), SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                 SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    return np.stack(cols, axis=1)


def evaluate_sh(sh, degree: int, direction) -> np.ndarray:
    """RGB in [0, 1] from SH coefficients along ``direction``.

    ``sh`` holds 3*(L+1)^2 values, coefficient-major (or shaped
    ((L+1)^2, 3)); a batch shaped (M, (L+1)^2, 3) with M directions is also
    accepted.
    """
    n_coef = (degree + 1) ** 2
    sh = np.asarray(sh, dtype=np.float64)
    batched = sh.ndim == 3
    if sh.size % (3 * n_coef) or (not batched and sh.size != 3 * n_coef):
        raise ValueError(f"expected {3 * n_coef} SH coefficients per splat for degree {degree}, got {sh.size}")
    sh = sh.reshape(-1, n_coef, 3)
    basis = sh_basis(direction, degree)
    rgb = np.einsum("mk,mkc->mc", basis, sh) + 0.5
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb if batched else rgb[0]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class GaussianSplat:
    position: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: Rotation
    sh: np.ndarray  # ((L+1)^2, 3)

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scales must be positive")

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(len(self.sh)))) - 1


@dataclass(frozen=True)
class GaussianSet:
    """Structure-of-arrays container for M splats sharing one SH degree."""

    positions: np.ndarray
    opacities: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # (M, 4) unit quaternions (w, x, y, z)
    sh: np.ndarray  # (M, (L+1)^2, 3)
    sh_degree: int = 1

    def __post_init__(self):
        m = len(self.positions)
        n_coef = (self.sh_degree + 1) ** 2
        arrays = {
            "positions": (np.asarray(self.positions, np.float64).reshape(m, 3)),
            "opacities": (np.asarray(self.opacities, np.float64).reshape(m)),
            "scales": (np.asarray(self.scales, np.float64).reshape(m, 3)),
            "rotations": (np.asarray(self.rotations, np.float64).reshape(m, 4)),
            "sh": (np.asarray(self.sh, np.float64).reshape(m, n_coef, 3)),
        }
        if np.any(arrays["opacities"] < 0) or np.any(arrays["opacities"] > 1):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(arrays["scales"] <= 0):
            raise ValueError("scales must be positive")
        if np.any(np.abs(np.linalg.norm(arrays["rotations"], axis=1) - 1) > 1e-6):
            raise ValueError("rotations must be unit quaternions")
        for name, arr in arrays.items():
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.positions)

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(self.positions[i], float(self.opacities[i]), self.scales[i],
                             Rotation(self.rotations[i]), self.sh[i])

    @classmethod
    def from_splats(cls, splats: Sequence[GaussianSplat], sh_degree: Optional[int] = None) -> "GaussianSet":
        if not splats:
            deg = 1 if sh_degree is None else sh_degree
            k = (deg + 1) ** 2
            return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, k, 3)), deg)
        deg = splats[0].sh_degree if sh_degree is None else sh_degree
        return cls(
            np.stack([s.position for s in splats]),
            np.array([s.opacity for s in splats]),
            np.stack([s.scale for s in splats]),
            np.stack([s.rotation.quat for s in splats]),
            np.stack([np.asarray(s.sh).reshape(-1, 3) for s in splats]),
            deg,
        )

    def permuted(self, order) -> "GaussianSet":
        order = np.asarray(order)
        return GaussianSet(self.positions[order], self.opacities[order], self.scales[order],
                           self.rotations[order], self.sh[order], self.sh_degree)


def raw_output_dim(sh_degree: int) -> int:
    return 3 + 1 + 3 + 4 + 3 * (sh_degree + 1) ** 2


@dataclass(frozen=True)
class DecoderWeights:
    """Dense MLP weights. ``weights[i]`` has shape (out, in)."""

    weights: tuple
    biases: tuple
    activations: tuple
    sh_degree: int = 1
    max_offset: float = 0.01
    max_scale: float = 1.0

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in self.biases)
        acts = tuple(self.activations)
        if not (len(ws) == len(bs) == len(acts)) or not ws:
            raise ValueError("weights, biases and activations must have equal nonzero length")
        for i, (w, b, a) in enumerate(zip(ws, bs, acts)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[1]} != previous output {ws[i - 1].shape[0]}")
            if a not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {a!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")
            w.setflags(write=False)
            b.setflags(write=False)
        if ws[-1].shape[0] != raw_output_dim(self.sh_degree):
            raise ValueError(
                f"final layer emits {ws[-1].shape[0]} values, SH degree {self.sh_degree} needs {raw_output_dim(self.sh_degree)}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.input_dim - 3

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @classmethod
    def zeros(cls, feature_dim: int, hidden=(64, 64), sh_degree: int = 1, **kw) -> "DecoderWeights":
        sizes = [3 + feature_dim, *hidden, raw_output_dim(sh_degree)]
        ws = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        acts = ["relu"] * len(hidden) + ["linear"]
        return cls(tuple(ws), tuple(bs), tuple(acts), sh_degree, **kw)

    @classmethod
    def random(cls, feature_dim: int, hidden=(64, 64), sh_degree: int = 1, seed: int = 0,
               activation: str = "relu", **kw) -> "DecoderWeights":
        """He-initialized weights with small random biases."""
        rng = np.random.default_rng(seed)
        sizes = [3 + feature_dim, *hidden, raw_output_dim(sh_degree)]
        ws = [rng.normal(scale=np.sqrt(2.0 / i), size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [rng.normal(scale=0.1, size=o) for o in sizes[1:]]
        acts = [activation] * len(hidden) + ["linear"]
        return cls(tuple(ws), tuple(bs), tuple(acts), sh_degree, **kw)

    @classmethod
    def splat_prior(cls, feature_dim: int, hidden=(64, 64), sh_degree: int = 1, seed: int = 0,
                    splat_scale: float = 0.002, opacity: float = 0.9, base_color=(0.6, 0.6, 0.6),
                    head_gain: float = 0.05, **kw) -> "DecoderWeights":
        """Random hidden layers with an output head biased towards sane splats.

        Used by the pipeline in place of trained weights: small isotropic,
        mostly opaque splats anchored at their query points, with colors
        modulated weakly by the triplane features.
        """
        base = cls.random(feature_dim, hidden, sh_degree, seed)
        rng = np.random.default_rng(seed + 1)
        w_out = rng.normal(scale=head_gain / np.sqrt(base.weights[-1].shape[1]), size=base.weights[-1].shape)
        w_out[:7] = 0.0  # keep offset, opacity and scale heads constant
        b_out = np.zeros(raw_output_dim(sh_degree))
        b_out[3] = np.log(opacity / (1 - opacity))
        b_out[4:7] = np.log(splat_scale)
        b_out[7] = 1.0
        b_out[11:14] = (np.asarray(base_color) - 0.5) / SH_C0
        ws = base.weights[:-1] + (w_out,)
        bs = base.biases[:-1] + (b_out,)
        kw.setdefault("max_scale", 10 * splat_scale)
        return cls(ws, bs, base.activations, sh_degree, **kw)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def _check_finite(a, layer):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite activation in layer {layer}")


def _forward(weights: DecoderWeights, inp: np.ndarray, keep=False):
    """Batched forward pass. einsum without BLAS keeps each row independent."""
    a = inp
    cache = [(None, a)]
    for i, (w, b, act) in enumerate(zip(weights.weights, weights.biases, weights.activations)):
        z = np.einsum("mi,oi->mo", a, w, optimize=False) + b
        _check_finite(z, i)
        a = _act(act, z)
        if keep:
            cache.append((z, a))
    return (a, cache) if keep else a


def _inputs(weights: DecoderWeights, xs, fs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    fs = np.asarray(fs, dtype=np.float64).reshape(len(xs), -1)
    if fs.shape[1] != weights.feature_dim:
        raise ValueError(f"feature length {fs.shape[1]} does not match decoder input {weights.feature_dim}")
    return np.concatenate([xs, fs], axis=1)


def decode_raw(weights: DecoderWeights, xs, fs) -> np.ndarray:
    """Raw (pre-activation-mapping) decoder outputs, shape (M, out)."""
    return _forward(weights, _inputs(weights, xs, fs))


def map_raw(weights: DecoderWeights, xs, raw: np.ndarray) -> GaussianSet:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    n_coef = (weights.sh_degree + 1) ** 2
    positions = xs + weights.max_offset * np.tanh(raw[:, 0:3])
    opacities = _sigmoid(raw[:, 3])
    scales = np.clip(np.exp(raw[:, 4:7]), MIN_SCALE, weights.max_scale)
    q = raw[:, 7:11]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    small = qn[:, 0] < ZERO_QUAT_EPS
    rotations = np.where(small[:, None], np.array([1.0, 0.0, 0.0, 0.0]), q / np.where(small[:, None], 1.0, qn))
    sh = raw[:, 11:].reshape(-1, n_coef, 3)
    return GaussianSet(positions, opacities, scales, rotations, sh, weights.sh_degree)


def decode_gaussians(weights: DecoderWeights, xs, fs) -> GaussianSet:
    """Decode one splat per query point."""
    raw = decode_raw(weights, xs, fs)
    return map_raw(weights, xs, raw)


def decode_gaussian(weights: DecoderWeights, x, f) -> GaussianSplat:
    return decode_gaussians(weights, np.reshape(x, (1, 3)), np.reshape(f, (1, -1))).splat(0)


@dataclass
class DecoderJacobian:
    """Derivatives of every raw output with respect to inputs and parameters.

    ``d_input`` has shape (out, in); ``d_weights[i]`` has shape
    (out, *weights[i].shape); ``d_biases[i]`` has shape (out, *biases[i].shape).
    """

    raw: np.ndarray
    d_input: np.ndarray
    d_weights: list = field(default_factory=list)
    d_biases: list = field(default_factory=list)


def decode_gradients(weights: DecoderWeights, x, f) -> DecoderJacobian:
    """Reverse-mode jacobian of the raw outputs for a single query."""
    inp = _inputs(weights, np.reshape(x, (1, 3)), np.reshape(f, (1, -1)))
    out, cache = _forward(weights, inp, keep=True)
    n_layers = len(weights.weights)
    # g: d(raw outputs) / d(pre-activation of the current layer), shape (out, width)
    g = np.eye(weights.output_dim) * _act_grad(weights.activations[-1], cache[-1][0][0])[None, :]
    d_w = [None] * n_layers
    d_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        a_prev = cache[i][1][0]
        d_w[i] = g[:, :, None] * a_prev[None, None, :]
        d_b[i] = g.copy()
        g_prev = g @ weights.weights[i]
        if i > 0:
            g = g_prev * _act_grad(weights.activations[i - 1], cache[i][0][0])[None, :]
        else:
            g = g_prev
    return DecoderJacobian(out[0], g, d_w, d_b)


def save_decoder(weights: DecoderWeights, manifest_path, payload_path=None) -> None:
    """JSON manifest plus little-endian float32 payload (per layer: W row-major, then b)."""
    manifest_path = Path(manifest_path)
    payload_path = Path(payload_path) if payload_path else manifest_path.with_suffix(".bin")
    manifest = {
        "format": "gaussian-decoder",
        "version": 1,
        "layer_sizes": weights.layer_sizes,
        "activations": list(weights.activations),
        "sh_degree": weights.sh_degree,
        "max_offset": weights.max_offset,
        "max_scale": weights.max_scale,
        "value_encoding": "float32-le",
        "payload": payload_path.name,
    }
    chunks = []
    for w, b in zip(weights.weights, weights.biases):
        chunks += [w.astype("<f4").ravel(), b.astype("<f4")]
    payload_path.write_bytes(np.concatenate(chunks).tobytes())
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_decoder(manifest_path) -> DecoderWeights:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    raw = np.frombuffer((manifest_path.parent / m["payload"]).read_bytes(), dtype="<f4").astype(np.float64)
    sizes = m["layer_sizes"]
    ws, bs, pos = [], [], 0
    for i, o in zip(sizes[:-1], sizes[1:]):
        ws.append(raw[pos:pos + i * o].reshape(o, i))
        pos += i * o
        bs.append(raw[pos:pos + o])
        pos += o
    if pos != raw.size:
        raise ValueError(f"decoder payload has {raw.size} values, manifest implies {pos}")
    return DecoderWeights(tuple(ws), tuple(bs), tuple(m["activations"]), int(m["sh_degree"]),
                          float(m["max_offset"]), float(m["max_scale"]))


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p) - np.log1p(-p)


def save_gaussians_ply(gs: GaussianSet, path, binary: bool = True) -> None:
    """Write the de-facto splatting PLY layout.

    Opacity is stored as a logit and scales as logs, as third-party splat
    viewers expect; f_rest is channel-major.
    """
    props = {}
    for i, ax in enumerate("xyz"):
        props[ax] = gs.positions[:, i].astype("<f4")
    for i, ax in enumerate(("nx", "ny", "nz")):
        props[ax] = np.zeros(len(gs), dtype="<f4")
    for c in range(3):
        props[f"f_dc_{c}"] = gs.sh[:, 0, c].astype("<f4")
    rest = gs.sh[:, 1:, :].transpose(0, 2, 1).reshape(len(gs), -1)
    for j in range(rest.shape[1]):
        props[f"f_rest_{j}"] = rest[:, j].astype("<f4")
    props["opacity"] = _logit(gs.opacities).astype("<f4")
    for i in range(3):
        props[f"scale_{i}"] = np.log(gs.scales[:, i]).astype("<f4")
    for i in range(4):
        props[f"rot_{i}"] = gs.rotations[:, i].astype("<f4")
    write_ply(path, props, binary=binary)


def load_gaussians_ply(path) -> GaussianSet:
    v = read_ply(path)["vertex"]
    n_rest = sum(1 for k in v if k.startswith("f_rest_"))
    n_coef = 1 + n_rest // 3
    degree = int(round(np.sqrt(n_coef))) - 1
    if (degree + 1) ** 2 != n_coef:
        raise ValueError(f"{n_rest} f_rest properties do not form a full SH band set")
    m = len(v["x"])
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    sh = np.zeros((m, n_coef, 3))
    for c in range(3):
        sh[:, 0, c] = v[f"f_dc_{c}"]
    if n_rest:
        rest = np.stack([v[f"f_rest_{j}"] for j in range(n_rest)], axis=1).reshape(m, 3, n_coef - 1)
        sh[:, 1:, :] = rest.transpose(0, 2, 1)
    opacity = _sigmoid(np.asarray(v["opacity"], dtype=np.float64))
    scales = np.exp(np.stack([v[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64))
    rot = np.stack([v[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norms > 0, rot / np.where(norms > 0, norms, 1), [1.0, 0, 0, 0])
    return GaussianSet(pos, opacity, scales, rot, sh, degree)
