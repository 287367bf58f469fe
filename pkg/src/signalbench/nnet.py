"""Minimal dense neural-network engine: forward/backward, dropout, Adam.

Just enough machinery for the dueling Q-network: fully-connected layers
with ReLU or linear activations, inverted-scaling dropout between layers,
exact reverse-mode gradients, the standard bias-corrected Adam update and
a Huber loss.  Everything is float64 so checkpoints and training
trajectories are bit-reproducible across platforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
LINEAR = "linear"


@dataclass
class DenseLayer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = RELU

    def __post_init__(self) -> None:
        if self.activation not in (RELU, LINEAR):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise ValueError("layer weight/bias shapes do not chain")


@dataclass
class DenseNet:
    """A chain of dense layers with dropout between consecutive layers.

    In ``eval`` mode the output is a deterministic function of input and
    parameters and the forward pass never touches the RNG.
    """

    layers: list[DenseLayer]
    dropout_rate: float = 0.0
    mode: str = "train"
    revision: int = 0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.w.shape[1] != b.w.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout rate must be in [0, 1)")

    @property
    def fan_in(self) -> int:
        return self.layers[0].w.shape[0]

    @property
    def fan_out(self) -> int:
        return self.layers[-1].w.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def train(self) -> None:
        self.mode = "train"

    def eval(self) -> None:
        self.mode = "eval"


def init_dense(
    sizes: list[int],
    rng: np.random.Generator,
    *,
    hidden_activation: str = RELU,
    output_activation: str = LINEAR,
    dropout_rate: float = 0.0,
) -> DenseNet:
    """He-initialized dense net with the given layer sizes."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        act = hidden_activation if i < len(sizes) - 2 else output_activation
        layers.append(DenseLayer(w=w, b=b, activation=act))
    return DenseNet(layers=layers, dropout_rate=dropout_rate)


@dataclass
class ForwardCache:
    net: DenseNet
    revision: int
    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    masks: list[np.ndarray | None]
    squeeze: bool


def forward(
    net: DenseNet, x: np.ndarray, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Affine/activation composition; returns output and a backward cache.

    In train mode with a positive dropout rate, inverted-scaled dropout
    masks are drawn from ``rng`` after every layer except the last.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.fan_in:
        raise ValueError(f"input width {h.shape[1]} != fan-in {net.fan_in}")
    use_dropout = net.mode == "train" and net.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout requires an rng")

    inputs, preacts, masks = [], [], []
    n_layers = len(net.layers)
    for i, layer in enumerate(net.layers):
        inputs.append(h)
        z = h @ layer.w + layer.b
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
        if use_dropout and i < n_layers - 1:
            keep = 1.0 - net.dropout_rate
            mask = (rng.random(h.shape) < keep).astype(float) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    out = h[0] if squeeze else h
    cache = ForwardCache(
        net=net, revision=net.revision, inputs=inputs, preacts=preacts, masks=masks, squeeze=squeeze
    )
    return out, cache


def backward(
    cache: ForwardCache, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact reverse-mode gradients for a matching forward call.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered
    like :meth:`DenseNet.params` (w, b per layer).  Raises if the network
    parameters changed since the forward pass.
    """
    net = cache.net
    if cache.revision != net.revision:
        raise ValueError("stale cache: network parameters changed since forward")
    dy = np.asarray(output_grad, dtype=float)
    if cache.squeeze:
        dy = dy[None, :]
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    dh = dy
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        mask = cache.masks[i]
        if mask is not None:
            dh = dh * mask
        z = cache.preacts[i]
        dz = dh * (z > 0.0) if layer.activation == RELU else dh
        grads[2 * i] = cache.inputs[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        dh = dz @ layer.w.T
    dx = dh[0] if cache.squeeze else dh
    return grads, dx


def dropout_forward(
    x: np.ndarray, rate: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Standalone inverted-scaling dropout (used at the trunk/head junction)."""
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(float) / keep
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


# ---------------------------------------------------------------------------
# Optimizer and loss


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @staticmethod
    def init_like(params: list[np.ndarray], learning_rate: float, **kw) -> "AdamState":
        return AdamState(
            learning_rate=learning_rate,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lengths differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


def huber(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    """Elementwise Huber loss of the residual."""
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual**2, delta * (a - 0.5 * delta))


def huber_grad(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    return np.clip(residual, -delta, delta)


# ---------------------------------------------------------------------------
# Checkpoint codec

_MAGIC = b"SBCK"
CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_blob(path, header: dict, arrays: list[np.ndarray]) -> None:
    """Self-describing flat checkpoint: JSON header + little-endian float64 blobs.

    Identical content produces byte-identical files (canonical JSON, fixed
    array order and dtype).
    """
    header = dict(header)
    header["format_version"] = CHECKPOINT_FORMAT_VERSION
    header["array_shapes"] = [list(a.shape) for a in arrays]
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_blob(path) -> tuple[dict, list[np.ndarray]]:
    """Parse a checkpoint written by :func:`write_blob`.

    Raises :class:`CheckpointError` on a bad magic, version mismatch or a
    truncated file; nothing is mutated on failure.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {header.get('format_version')} "
            f"!= supported {CHECKPOINT_FORMAT_VERSION}"
        )
    arrays = []
    offset = 8 + hlen
    for shape in header["array_shapes"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy())
        offset = end
    if offset != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return header, arrays
