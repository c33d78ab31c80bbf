"""Parameter management, MLP blocks, Adam, and checkpoint serialization."""

from __future__ import annotations

import hashlib
import json
from typing import Iterable

import numpy as np

from .autodiff import DiffTensor, DimensionError, add, layer_norm_rows, matmul, mul, relu, tensor

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed, stale, or corrupted."""


class ParamStore:
    """Named, insertion-ordered collection of trainable tensors.

    Creation order is the iteration order everywhere (optimizer, checkpoint),
    which keeps training deterministic.
    """

    def __init__(self, rng: np.random.Generator):
        self._params: dict[str, DiffTensor] = {}
        self._rng = rng

    def param(self, name: str, shape: tuple[int, ...], fan_in: int | None = None) -> DiffTensor:
        """Create or fetch a parameter.

        New parameters are drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
        ``fan_in`` defaults to the first dimension.
        """
        existing = self._params.get(name)
        if existing is not None:
            if existing.shape != tuple(shape):
                raise DimensionError(f"parameter {name!r} exists with shape {existing.shape}, requested {tuple(shape)}")
            return existing
        if fan_in is None:
            fan_in = shape[0] if shape else 1
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        t = tensor(self._rng.uniform(-bound, bound, size=shape))
        self._params[name] = t
        return t

    def constant_param(self, name: str, value: np.ndarray) -> DiffTensor:
        """Create or fetch a parameter with a fixed initial value."""
        existing = self._params.get(name)
        if existing is not None:
            return existing
        t = tensor(np.asarray(value, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> DiffTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, DiffTensor]]:
        return self._params.items()

    def values(self) -> list[DiffTensor]:
        return list(self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
        extra = set(state) - set(self._params)
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)}")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(store: ParamStore, name: str, x: DiffTensor, in_dim: int, out_dim: int) -> DiffTensor:
    w = store.param(f"{name}.w", (in_dim, out_dim), fan_in=in_dim)
    b = store.param(f"{name}.b", (out_dim,), fan_in=in_dim)
    return add(matmul(x, w), b)


def mlp_params(store: ParamStore, name: str, dims: list[int]) -> list[tuple[DiffTensor, DiffTensor]]:
    """Create the (weight, bias) list for an MLP with the given layer widths."""
    layers = []
    for i in range(len(dims) - 1):
        w = store.param(f"{name}.{i}.w", (dims[i], dims[i + 1]), fan_in=dims[i])
        b = store.param(f"{name}.{i}.b", (dims[i + 1],), fan_in=dims[i])
        layers.append((w, b))
    return layers


def mlp_apply(x: DiffTensor, layers: list[tuple[DiffTensor, DiffTensor]]) -> DiffTensor:
    """Affine layers with ReLU between them and none after the last."""
    for i, (w, b) in enumerate(layers):
        x = add(matmul(x, w), b)
        if i < len(layers) - 1:
            x = relu(x)
    return x


def layer_norm_affine(store: ParamStore, name: str, x: DiffTensor, dim: int, eps: float = 1e-5) -> DiffTensor:
    # Gain starts at 1 and bias at 0 so a fresh network begins as a plain
    # normalization; uniform init here would randomly rescale activations.
    gain = store.constant_param(f"{name}.gain", np.ones(dim))
    bias = store.constant_param(f"{name}.bias", np.zeros(dim))
    return add(mul(layer_norm_rows(x, eps=eps), gain), bias)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad**2
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _params_checksum(payload: dict[str, dict]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_checkpoint(path: str, store: ParamStore, meta: dict | None = None) -> None:
    """Write a flat JSON checkpoint: {name -> {shape, data}} plus tagged keys.

    Reserved keys: ``__format_version__``, ``__meta__``, ``__checksum__``.
    """
    payload: dict[str, dict] = {}
    for name, p in store.items():
        payload[name] = {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
    doc: dict = {"__format_version__": CHECKPOINT_FORMAT_VERSION, "__meta__": meta or {}}
    doc["__checksum__"] = _params_checksum(payload)
    doc.update(payload)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint, verifying format version and checksum."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}") from None
    version = doc.pop("__format_version__", None)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r} is not supported (expected {CHECKPOINT_FORMAT_VERSION})")
    meta = doc.pop("__meta__", {})
    checksum = doc.pop("__checksum__", None)
    if checksum != _params_checksum(doc):
        raise CheckpointError(f"checkpoint {path} failed its integrity check")
    state: dict[str, np.ndarray] = {}
    for name, entry in doc.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        state[name] = arr
    return state, meta
