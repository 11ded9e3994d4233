"""Shared MLP decoder mapping triplane features to density and color.

Forward and reverse passes are written out by hand so every gradient in the
fitting loop can be checked against finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

_DEC_MAGIC = b"DEC0"


def _sigmoid(x):
    return expit(x)


def _softplus(x):
    return np.logaddexp(0.0, x)


ACTIVATIONS = ("silu", "identity")


@dataclass
class DecoderParams:
    layers: list  # [(W [out, in], b [out]), ...]
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i} input width does not match previous output")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list:
        return [tuple(w.shape) for w, _ in self.layers]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    @classmethod
    def unflatten(cls, vec, sizes, activation: str = "silu") -> "DecoderParams":
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(o * i + o for o, i in sizes)
        if vec.shape != (expected,):
            raise ValueError(f"flat vector has {vec.size} entries, sizes need {expected}")
        layers, pos = [], 0
        for out_dim, in_dim in sizes:
            w = vec[pos:pos + out_dim * in_dim].reshape(out_dim, in_dim).copy()
            pos += out_dim * in_dim
            b = vec[pos:pos + out_dim].copy()
            pos += out_dim
            layers.append((w, b))
        return cls(layers, activation)

    def with_flat(self, vec) -> "DecoderParams":
        return DecoderParams.unflatten(vec, self.sizes, self.activation)

    def copy(self) -> "DecoderParams":
        return DecoderParams([(w.copy(), b.copy()) for w, b in self.layers], self.activation)


def init_decoder(in_dim: int, hidden: int = 64, depth: int = 3, rng=None,
                 activation: str = "silu") -> DecoderParams:
    """He-style initialization; zero biases."""
    rng = np.random.default_rng(rng)
    widths = [in_dim] + [hidden] * depth + [4]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return DecoderParams(layers, activation)


@dataclass
class DecoderOutput:
    sigma: np.ndarray  # [N], >= 0
    rgb: np.ndarray    # [N, 3] in [0, 1]


@dataclass
class DecoderCache:
    inputs: list       # input of each layer
    preacts: list      # pre-activation of each hidden layer
    gates: list        # sigmoid of each hidden pre-activation (SiLU only)
    logits: np.ndarray


def forward_raw(params: DecoderParams, feat):
    """Raw 4-channel logits and the activations needed for the reverse pass."""
    x = np.asarray(feat)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"feature width {x.shape[-1]} does not match decoder input {params.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite decoder input")
    inputs, preacts, gates = [], [], []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ w.T.astype(x.dtype, copy=False) + b.astype(x.dtype, copy=False)
        if i == last:
            h = z
        else:
            preacts.append(z)
            if params.activation == "silu":
                s = _sigmoid(z)
                gates.append(s)
                h = z * s
            else:
                h = z
    return h, DecoderCache(inputs, preacts, gates, h)


def backward_raw(params: DecoderParams, cache: DecoderCache, grad_logits):
    """Reverse pass from logit gradients to (flat parameter gradient, input gradient)."""
    dtype = cache.logits.dtype
    g = np.asarray(grad_logits, dtype=dtype).reshape(cache.logits.shape)
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (g.T @ cache.inputs[i], g.sum(axis=0))
        g = g @ w.astype(dtype, copy=False)
        if i > 0 and params.activation == "silu":
            z = cache.preacts[i - 1]
            s = cache.gates[i - 1]
            g = g * (s * (1.0 + z * (1.0 - s)))
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat.astype(np.float64), g


def heads(logits):
    """Density via softplus, color via sigmoid."""
    return DecoderOutput(_softplus(logits[:, 0]), _sigmoid(logits[:, 1:4]))


def heads_backward(logits, out: DecoderOutput, d_sigma, d_rgb):
    g = np.empty_like(logits)
    g[:, 0] = np.asarray(d_sigma).reshape(-1) * _sigmoid(logits[:, 0])
    g[:, 1:4] = np.asarray(d_rgb).reshape(-1, 3) * out.rgb * (1.0 - out.rgb)
    return g


def decode(params: DecoderParams, feat) -> DecoderOutput:
    logits, _ = forward_raw(params, feat)
    return heads(logits)


def decode_backward(params: DecoderParams, feat, d_sigma, d_rgb):
    """Gradients of ``sum(d_sigma*sigma) + sum(d_rgb*rgb)``.

    Returns ``(grad_params_flat, grad_feat)``; ``grad_feat`` matches ``feat``.
    """
    feat_arr = np.asarray(feat, dtype=np.float64)
    logits, cache = forward_raw(params, feat_arr)
    out = heads(logits)
    g = heads_backward(logits, out, d_sigma, d_rgb)
    flat, gfeat = backward_raw(params, cache, g)
    return flat, gfeat.reshape(feat_arr.shape)


def decoder_to_bytes(params: DecoderParams) -> bytes:
    act = params.activation.encode()
    parts = [_DEC_MAGIC, struct.pack("<I", len(params.layers))]
    for out_dim, in_dim in params.sizes:
        parts.append(struct.pack("<II", out_dim, in_dim))
    parts.append(struct.pack("<I", len(act)) + act)
    parts.append(params.flatten().astype("<f8").tobytes())
    return b"".join(parts)


def save_decoder(params: DecoderParams, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(decoder_to_bytes(params))
    tmp.replace(path)


def decoder_from_bytes(data: bytes) -> DecoderParams:
    if data[:4] != _DEC_MAGIC:
        raise ValueError(f"bad decoder magic {data[:4]!r}")
    (n_layers,) = struct.unpack_from("<I", data, 4)
    pos = 8
    sizes = []
    for _ in range(n_layers):
        sizes.append(struct.unpack_from("<II", data, pos))
        pos += 8
    (n_act,) = struct.unpack_from("<I", data, pos)
    pos += 4
    activation = data[pos:pos + n_act].decode()
    pos += n_act
    count = sum(o * i + o for o, i in sizes)
    vec = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
    return DecoderParams.unflatten(vec, sizes, activation)


def load_decoder(path) -> DecoderParams:
    return decoder_from_bytes(Path(path).read_bytes())
