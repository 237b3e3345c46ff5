"""Small fixed-topology MLPs with hand-written reverse mode, Adam and soft updates.

Everything is float64 numpy. Weights are stored row-major as ``(fan_in, fan_out)``
so a batch of row vectors is pushed through with ``x @ W + b``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Input or gradient does not fit the network it is fed to."""


class StaleTapeError(RuntimeError):
    """A tape is used after its parameters changed, or with a foreign network."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by :func:`adam_step` when a gradient holds NaN or inf."""


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        acts = tuple(self.activations)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least an input and an output dim")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        if len(acts) != len(dims) - 1:
            raise ValueError(f"need {len(dims) - 1} activations, got {len(acts)}")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def build(cls, dims: Sequence[int], hidden: str = "relu", output: str = "identity",
              seed: int = 0) -> "MlpSpec":
        n = len(dims) - 1
        return cls(tuple(dims), tuple([hidden] * (n - 1) + [output]), seed)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.layer_dims[:-1], self.layer_dims[1:]))


class ParamSet:
    """Flat parameter vector plus the per-layer ``(fan_in, fan_out)`` index.

    Layer ``k`` occupies ``fan_in * fan_out`` weight entries followed by
    ``fan_out`` bias entries.
    """

    def __init__(self, flat: np.ndarray, shapes: Sequence[tuple[int, int]]):
        self.shapes = tuple((int(i), int(o)) for i, o in shapes)
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(i * o + o for i, o in self.shapes)
        if flat.ndim != 1 or flat.size != expected:
            raise ShapeError(f"flat vector has {flat.size} entries, index needs {expected}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("parameters must be finite")
        self.flat = flat
        self.version = 0
        offsets = []
        pos = 0
        for i, o in self.shapes:
            offsets.append((pos, pos + i * o, pos + i * o + o))
            pos += i * o + o
        self._offsets = tuple(offsets)

    def __len__(self) -> int:
        return self.flat.size

    def __repr__(self) -> str:
        return f"ParamSet(shapes={self.shapes}, size={self.flat.size})"

    def weight(self, k: int) -> np.ndarray:
        start, stop, _ = self._offsets[k]
        return self.flat[start:stop].reshape(self.shapes[k])

    def bias(self, k: int) -> np.ndarray:
        _, start, stop = self._offsets[k]
        return self.flat[start:stop]

    def extent(self, k: int) -> tuple[int, int]:
        """``(offset, length)`` of layer ``k`` inside the flat vector."""
        start, _, stop = self._offsets[k]
        return start, stop - start

    def copy(self) -> "ParamSet":
        return ParamSet(self.flat.copy(), self.shapes)

    def assign_(self, values: np.ndarray) -> None:
        """Overwrite in place; any tape recorded against the old values goes stale."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.flat.shape:
            raise ShapeError("assigned vector has the wrong length")
        self.flat[:] = values
        self.version += 1

    def zeros_like(self) -> "ParamSet":
        return ParamSet(np.zeros_like(self.flat), self.shapes)


def init_params(spec: MlpSpec) -> ParamSet:
    """Glorot-uniform weights, zero biases, drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    chunks = []
    for fan_in, fan_out in spec.shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ParamSet(np.concatenate(chunks), spec.shapes)


@dataclass
class Tape:
    spec: MlpSpec
    params: ParamSet
    version: int
    single: bool
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(name: str, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # `out` is the post-activation value; relu' and tanh' are recoverable from it
    if name == "relu":
        return grad * (out > 0.0)
    if name == "tanh":
        return grad * (1.0 - out * out)
    return grad


def mlp_forward(spec: MlpSpec, params: ParamSet, x) -> tuple[np.ndarray, Tape]:
    """Evaluate the network on one vector or a batch of row vectors.

    Returns the output (same leading shape as ``x``) and a tape for
    :func:`mlp_backward`.
    """
    if params.shapes != spec.shapes:
        raise ShapeError(f"params {params.shapes} do not match spec {spec.shapes}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.ndim != 2 or h.shape[1] != spec.in_dim:
        raise ShapeError(f"expected input width {spec.in_dim}, got shape {x.shape}")
    tape = Tape(spec, params, params.version, single)
    for k, act in enumerate(spec.activations):
        tape.inputs.append(h)
        h = _activate(act, h @ params.weight(k) + params.bias(k))
        tape.outputs.append(h)
    return (h[0] if single else h), tape


def mlp_backward(tape: Tape, output_gradient,
                 param_grad: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    """Pull ``output_gradient`` back through a recorded forward pass.

    Returns ``(parameter_gradient, input_gradient)``; the parameter gradient is
    flat and aligned with ``tape.params.flat``, summed over the batch. With
    ``param_grad=False`` only the input gradient is computed.
    """
    if tape.params.version != tape.version:
        raise StaleTapeError("parameters were modified after the forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.outputs[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output {tape.outputs[-1].shape}")
    params = tape.params
    grad = np.empty_like(params.flat) if param_grad else None
    for k in range(len(tape.spec.activations) - 1, -1, -1):
        g = _activate_grad(tape.spec.activations[k], tape.outputs[k], g)
        if param_grad:
            start, stop, bstop = params._offsets[k]
            grad[start:stop] = (tape.inputs[k].T @ g).ravel()
            grad[stop:bstop] = g.sum(axis=0)
        g = g @ params.weight(k).T
    return grad, (g[0] if tape.single else g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-3, **kw) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def adam_step(state: AdamState, params: ParamSet, gradient) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ShapeError(f"gradient length {g.size} != params length {params.flat.size}")
    bad = ~np.isfinite(g)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NonFiniteGradientError(
            f"{idx.size} non-finite gradient entries (first at {idx[:5].tolist()})")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = ParamSet(params.flat - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), params.shapes)
    return new, AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)


def soft_update(target: ParamSet, online: ParamSet, mu: float) -> ParamSet:
    """Polyak averaging ``mu * online + (1 - mu) * target``."""
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    if target.shapes != online.shapes:
        raise ShapeError("target and online parameter sets differ in shape")
    return ParamSet(mu * online.flat + (1.0 - mu) * target.flat, target.shapes)


_MAGIC = b"UOEPPRM1"


def write_params(fh: BinaryIO, params: ParamSet) -> None:
    """Shape index (uint32 layer count, then fan_in/fan_out pairs), then float64 data."""
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", len(params.shapes)))
    for i, o in params.shapes:
        fh.write(struct.pack("<II", i, o))
    fh.write(params.flat.astype("<f8").tobytes())


def read_params(fh: BinaryIO) -> ParamSet:
    if fh.read(len(_MAGIC)) != _MAGIC:
        raise ValueError("not a parameter file")
    (n,) = struct.unpack("<I", fh.read(4))
    shapes = [struct.unpack("<II", fh.read(8)) for _ in range(n)]
    size = sum(i * o + o for i, o in shapes)
    data = np.frombuffer(fh.read(8 * size), dtype="<f8")
    if data.size != size:
        raise ValueError("truncated parameter file")
    return ParamSet(data.astype(np.float64), shapes)


def save_params(path, params: ParamSet) -> None:
    with open(path, "wb") as fh:
        write_params(fh, params)


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        return read_params(fh)
