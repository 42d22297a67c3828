"""LeNet: conv(6) -> pool -> conv(16) -> pool -> fc120 -> fc84 -> fc10, ReLU activations."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .tensor import (
    Tape,
    Tensor,
    ShapeError,
    conv2d,
    cross_entropy_from_logits,
    flatten,
    linear,
    maxpool2d,
    relu,
)

PARAM_NAMES = (
    "conv1_w", "conv1_b",
    "conv2_w", "conv2_b",
    "fc1_w", "fc1_b",
    "fc2_w", "fc2_b",
    "fc3_w", "fc3_b",
)
CONV_WEIGHT_NAMES = ("conv1_w", "conv2_w")
CHECKPOINT_FORMAT = "minmax-lenet-checkpoint"
CHECKPOINT_VERSION = 1

# spatial size seen by the network for each input channel count
INPUT_SIZE = {1: 28, 3: 32}


def param_shapes(c_in: int) -> dict[str, tuple[int, ...]]:
    if c_in not in INPUT_SIZE:
        raise ValueError(f"c_in must be 1 (MNIST) or 3 (CIFAR-10), got {c_in}")
    side = ((INPUT_SIZE[c_in] - 4) // 2 - 4) // 2
    flat = 16 * side * side
    return {
        "conv1_w": (6, c_in, 5, 5), "conv1_b": (6,),
        "conv2_w": (16, 6, 5, 5), "conv2_b": (16,),
        "fc1_w": (120, flat), "fc1_b": (120,),
        "fc2_w": (84, 120), "fc2_b": (84,),
        "fc3_w": (10, 84), "fc3_b": (10,),
    }


@dataclass
class LeNetParams:
    """All LeNet weights keyed by :data:`PARAM_NAMES`."""

    arrays: dict[str, np.ndarray]
    c_in: int
    init_seed: int | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.c_in)
        missing = set(expected) - set(self.arrays)
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["conv1_w"].dtype

    def copy(self) -> "LeNetParams":
        return LeNetParams({k: v.copy() for k, v in self.arrays.items()},
                           self.c_in, self.init_seed, dict(self.metadata))

    def astype(self, dtype) -> "LeNetParams":
        return LeNetParams({k: v.astype(dtype) for k, v in self.arrays.items()},
                           self.c_in, self.init_seed, dict(self.metadata))


def init_params(seed: int, c_in: int, dtype=np.float32) -> LeNetParams:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(c_in).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return LeNetParams(arrays, c_in, seed)


def zeros_params(c_in: int, dtype=np.float64) -> LeNetParams:
    return LeNetParams({k: np.zeros(s, dtype=dtype) for k, s in param_shapes(c_in).items()}, c_in)


def logits_graph(p: dict[str, Tensor], x: Tensor) -> Tensor:
    """LeNet forward pass over tensors; records on any active tape."""
    if x.data.ndim != 4:
        raise ShapeError(f"LeNet expects input[N,C,H,W], got {x.shape}")
    h = relu(conv2d(x, p["conv1_w"], p["conv1_b"]))
    h, _ = maxpool2d(h, 2, 2)
    h = relu(conv2d(h, p["conv2_w"], p["conv2_b"]))
    h, _ = maxpool2d(h, 2, 2)
    h = flatten(h)
    if h.shape[1] != p["fc1_w"].shape[1]:
        raise ShapeError(f"flattened features {h.shape[1]} do not match fc1 input {p['fc1_w'].shape[1]}")
    h = relu(linear(h, p["fc1_w"], p["fc1_b"]))
    h = relu(linear(h, p["fc2_w"], p["fc2_b"]))
    return linear(h, p["fc3_w"], p["fc3_b"])


def _check_input(p: LeNetParams, x: np.ndarray) -> None:
    side = INPUT_SIZE[p.c_in]
    if x.ndim != 4 or x.shape[1:] != (p.c_in, side, side):
        raise ShapeError(f"expected input [N,{p.c_in},{side},{side}], got {x.shape}")


def forward(p: LeNetParams, x, batch_size: int = 1000) -> np.ndarray:
    """Logits for ``x`` (no softmax). Large inputs are processed in chunks."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    _check_input(p, x)
    ps = {k: Tensor._wrap(v.copy()) for k, v in p.arrays.items()}
    out = [logits_graph(ps, Tensor._wrap(np.ascontiguousarray(x[i:i + batch_size], dtype=p.dtype))).data
           for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, 10), dtype=p.dtype)
    return np.concatenate(out)


def predict(p: LeNetParams, x, batch_size: int = 1000) -> np.ndarray:
    """Argmax of the logits; the lowest index wins ties."""
    return forward(p, x, batch_size).argmax(axis=1)


def accuracy(p: LeNetParams, x, labels, batch_size: int = 1000) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(p, x, batch_size) == labels))


def input_gradient(p: LeNetParams, x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. the input batch, plus the logits."""
    ps = {k: Tensor._wrap(v.copy()) for k, v in p.arrays.items()}
    with Tape() as tape:
        xt = tape.watch(Tensor(x, dtype=p.dtype))
        logits = logits_graph(ps, xt)
        loss = cross_entropy_from_logits(logits, labels)
        (gx,) = tape.gradient(loss, [xt])
    return gx, logits.data


def input_vjp(p: LeNetParams, x: np.ndarray, logits_grad_fn) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate a caller-chosen logits gradient to the input.

    ``logits_grad_fn(logits) -> dlogits`` is evaluated on the forward
    logits; returns (input gradient, logits).
    """
    ps = {k: Tensor._wrap(v.copy()) for k, v in p.arrays.items()}
    with Tape() as tape:
        xt = tape.watch(Tensor(x, dtype=p.dtype))
        logits = logits_graph(ps, xt)
        seed = logits_grad_fn(logits.data)
        (gx,) = tape.gradient(logits, [xt], output_gradient=seed)
    return gx, logits.data


def conv_weights_flat(p: LeNetParams, layers: tuple[str, ...] = CONV_WEIGHT_NAMES) -> np.ndarray:
    """Conv weights (biases excluded) concatenated in row-major order."""
    return np.concatenate([p.arrays[name].reshape(-1) for name in layers])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(p: LeNetParams, path: str | Path) -> Path:
    """Write ``p`` as a self-describing JSON container.

    Arrays are stored as base64 of their little-endian bytes so the file is
    exact and byte-for-byte reproducible (keys sorted, no timestamps).
    """
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "c_in": p.c_in,
        "init_seed": p.init_seed,
        "metadata": p.metadata,
        "arrays": {
            name: {
                "shape": list(arr.shape),
                "dtype": arr.dtype.newbyteorder("<").str,
                "data": base64.b64encode(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
            }
            for name, arr in p.arrays.items()
        },
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def load_checkpoint(path: str | Path) -> LeNetParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    arrays = {}
    for name, entry in doc["arrays"].items():
        raw = base64.b64decode(entry["data"])
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).astype(
            np.dtype(entry["dtype"]).newbyteorder("="))
    return LeNetParams(arrays, doc["c_in"], doc.get("init_seed"), doc.get("metadata", {}))
