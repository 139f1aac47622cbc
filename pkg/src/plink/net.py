"""The learnable field F(x + s*dir, dir).

A positionally encoded fully-connected network with two output heads: a
nonnegative reflection density (softplus) and an unbounded drop channel.
Parameters live in one flat float64 vector; gradients come back as a flat
vector of the same length via the autodiff tape, and the optimizer is a
standard adaptive-moment update with bias correction.

Checkpoint layout (single model record, little-endian):

    magic   8 bytes   b"PLNKFLD1"
    header  7 int32   [encoding_levels, dir_levels, use_direction,
                       n_hidden, hidden_width, has_phi_head, param_count]
    params  param_count float32

A checkpoint file written by the trainer holds b"PLNKCKPT" + int32 record
count, then that many model records (coarse first, fine second).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (CorruptedModelError, DivergenceError, InvalidInputError,
                     OutOfBoundsError)

MODEL_MAGIC = b"PLNKFLD1"
CHECKPOINT_MAGIC = b"PLNKCKPT"
POSITION_BOUND = 1.001


def encode(positions, directions=None, levels: int = 8, dir_levels: int = 2) -> np.ndarray:
    """Fourier-feature encoding of unit-cube positions (and optional directions).

    Raw coordinates are kept alongside sin/cos pairs at frequencies
    2^0 pi ... 2^(levels-1) pi. Output width is 3 + 6*levels, plus
    3 + 6*dir_levels when directions are given.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if np.any(np.abs(positions) > POSITION_BOUND):
        raise OutOfBoundsError("encoded positions must lie inside the unit cube")
    parts = [positions]
    parts.extend(_fourier(positions, levels))
    if directions is not None:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        parts.append(directions)
        parts.extend(_fourier(directions, dir_levels))
    return np.concatenate(parts, axis=-1)


def _fourier(coords: np.ndarray, levels: int) -> list:
    out = []
    for k in range(levels):
        scaled = coords * (2.0 ** k * np.pi)
        out.append(np.sin(scaled))
        out.append(np.cos(scaled))
    return out


def encoded_width(levels: int, dir_levels: int, use_direction: bool) -> int:
    width = 3 + 6 * levels
    if use_direction:
        width += 3 + 6 * dir_levels
    return width


@dataclass
class FieldModel:
    """Architecture description plus the flat parameter vector."""

    encoding_levels: int = 8
    dir_levels: int = 2
    use_direction: bool = True
    layer_widths: list = field(default_factory=lambda: [128, 128, 128, 128])
    has_phi_head: bool = False
    params: np.ndarray = None

    def __post_init__(self):
        if self.params is None:
            self.params = np.zeros(self.param_count())
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.param_count(),):
            raise InvalidInputError(
                f"parameter vector must have length {self.param_count()}"
            )

    def input_width(self) -> int:
        return encoded_width(self.encoding_levels, self.dir_levels, self.use_direction)

    def layer_shapes(self) -> list:
        """(weight_shape, bias_shape) per linear layer, heads last."""
        widths = [self.input_width()] + list(self.layer_widths)
        shapes = [((widths[i], widths[i + 1]), (widths[i + 1],))
                  for i in range(len(self.layer_widths))]
        shapes.append(((widths[-1], 1), (1,)))  # sigma head
        if self.has_phi_head:
            shapes.append(((widths[-1], 1), (1,)))  # phi head
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in self.layer_shapes())

    def param_views(self) -> list:
        """(weight, bias) ndarray views into the flat vector, layout order."""
        views = []
        offset = 0
        for w_shape, b_shape in self.layer_shapes():
            w_size = int(np.prod(w_shape))
            b_size = int(np.prod(b_shape))
            w = self.params[offset:offset + w_size].reshape(w_shape)
            b = self.params[offset + w_size:offset + w_size + b_size]
            views.append((w, b))
            offset += w_size + b_size
        return views

    def copy(self) -> "FieldModel":
        return FieldModel(self.encoding_levels, self.dir_levels, self.use_direction,
                          list(self.layer_widths), self.has_phi_head,
                          self.params.copy())


def init_model(encoding_levels: int = 8, dir_levels: int = 2, use_direction: bool = True,
               layer_widths=None, has_phi_head: bool = False, rng=None,
               sigma_bias: float = -4.0) -> FieldModel:
    """He-initialized model; the sigma head bias starts negative so the
    initial field carries little return mass and the cdf is far from 1."""
    rng = np.random.default_rng(rng)
    model = FieldModel(encoding_levels, dir_levels, use_direction,
                       list(layer_widths or [128, 128, 128, 128]), has_phi_head)
    views = model.param_views()
    n_hidden = len(model.layer_widths)
    for i, (w, b) in enumerate(views):
        fan_in = w.shape[0]
        w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        b[...] = 0.0
        if i == n_hidden:  # sigma head
            b[...] = sigma_bias
    return model


class ModelGraph:
    """Leaf tensors over a model's parameters for one differentiable pass."""

    def __init__(self, model: FieldModel):
        self.model = model
        self.leaves = [(ad.Tensor(w), ad.Tensor(b)) for w, b in model.param_views()]

    def forward(self, feats: np.ndarray):
        """(sigma, phi) Tensors of shape (N,); phi is None without the head."""
        n_hidden = len(self.model.layer_widths)
        h = feats
        for w, b in self.leaves[:n_hidden]:
            h = ad.relu(h @ w + b)
        w_s, b_s = self.leaves[n_hidden]
        sigma = ad.softplus((h @ w_s + b_s)[:, 0])
        phi = None
        if self.model.has_phi_head:
            w_p, b_p = self.leaves[n_hidden + 1]
            phi = (h @ w_p + b_p)[:, 0]
        return sigma, phi

    def gradient(self) -> np.ndarray:
        """Flat gradient gathered from the leaves after a backward pass."""
        parts = []
        for w, b in self.leaves:
            for leaf in (w, b):
                g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                parts.append(np.ravel(g))
        return np.concatenate(parts)


def forward(model: FieldModel, feats: np.ndarray):
    """Inference pass on plain arrays; returns (sigma, phi-or-None)."""
    if np.isnan(model.params).any():
        raise CorruptedModelError("model parameters contain NaN")
    n_hidden = len(model.layer_widths)
    views = model.param_views()
    h = np.asarray(feats, dtype=float)
    for w, b in views[:n_hidden]:
        h = np.maximum(0.0, h @ w + b)
    w_s, b_s = views[n_hidden]
    sigma = ad.softplus((h @ w_s + b_s)[:, 0])
    phi = None
    if model.has_phi_head:
        w_p, b_p = views[n_hidden + 1]
        phi = (h @ w_p + b_p)[:, 0]
    return sigma, phi


@dataclass
class GradientTape:
    """A scalar loss value and its flat parameter gradient."""

    loss: float
    gradient: np.ndarray

    def __post_init__(self):
        self.gradient = np.asarray(self.gradient, dtype=np.float64)
        if not np.all(np.isfinite(self.gradient)):
            raise DivergenceError("gradient contains non-finite entries")


def backward(graph: ModelGraph, loss: ad.Tensor) -> GradientTape:
    """Reverse-mode gradient of a recorded scalar loss for one model."""
    loss.backward()
    return GradientTape(loss.item(), graph.gradient())


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_model(cls, model: FieldModel) -> "AdamState":
        n = model.params.size
        return cls(np.zeros(n), np.zeros(n), 0)


def opt_step(model: FieldModel, tape: GradientTape, lr: float, state: AdamState,
             betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    if tape.gradient.shape != model.params.shape:
        raise InvalidInputError("gradient length must match the parameter vector")
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * tape.gradient
    state.v = b2 * state.v + (1.0 - b2) * tape.gradient ** 2
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if not np.all(np.isfinite(update)):
        bad = int(np.flatnonzero(~np.isfinite(update))[0])
        raise DivergenceError(
            f"non-finite update at parameter {bad} "
            f"(m={state.m[bad]!r}, v={state.v[bad]!r}, step {state.t})"
        )
    model.params -= update


# -- checkpoint serialization ----------------------------------------------------


def _write_model(fh, model: FieldModel) -> None:
    if len(set(model.layer_widths)) != 1:
        raise InvalidInputError("checkpoint layout requires uniform hidden widths")
    fh.write(MODEL_MAGIC)
    header = struct.pack(
        "<7i", model.encoding_levels, model.dir_levels, int(model.use_direction),
        len(model.layer_widths), model.layer_widths[0], int(model.has_phi_head),
        model.params.size,
    )
    fh.write(header)
    fh.write(model.params.astype("<f4").tobytes())


def _read_model(fh) -> FieldModel:
    magic = fh.read(len(MODEL_MAGIC))
    if magic != MODEL_MAGIC:
        raise InvalidInputError("not a field-model record")
    levels, dir_levels, use_dir, n_hidden, width, has_phi, count = struct.unpack(
        "<7i", fh.read(28))
    params = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64)
    model = FieldModel(levels, dir_levels, bool(use_dir), [width] * n_hidden,
                       bool(has_phi), params)
    return model


def save_checkpoint(path, coarse: FieldModel, fine: FieldModel) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<i", 2))
        _write_model(fh, coarse)
        _write_model(fh, fine)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InvalidInputError("not a checkpoint file")
        (count,) = struct.unpack("<i", fh.read(4))
        if count != 2:
            raise InvalidInputError("checkpoint must hold coarse and fine models")
        coarse = _read_model(fh)
        fine = _read_model(fh)
    return coarse, fine
