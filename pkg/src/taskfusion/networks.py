"""Fusion network, visual critic and dense-prediction task head.

All three are plain functions of (inputs, ParamSet). Images are batched as
``(N, 1, H, W)``; a bare ``(H, W)`` array is promoted to a batch of one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError, UsageError
from .tensor import Tape, Tensor

NAMES = ("omega", "theta_V", "theta_P")
WIDTH = 16
SLOPE = 0.2
DILATIONS = (1, 2, 3)
CRITIC_CHANNELS = (16, 32, 64, 64)
TASK_CHANNELS = (16, 16)


@dataclass
class ParamSet:
    """Ordered named parameters of one network."""

    name: str
    entries: dict[str, Tensor]
    step_count: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in NAMES:
            raise ConfigError(f"unknown parameter set {self.name!r}")

    def __getitem__(self, key: str) -> Tensor:
        return self.entries[key]

    def tensors(self) -> list[Tensor]:
        return list(self.entries.values())

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.entries.items()}

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.entries.values()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self.entries.values()])

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.count,):
            raise ShapeError(f"flat vector of shape {flat.shape} for {self.count} parameters")
        out, start = {}, 0
        for k, v in self.entries.items():
            out[k] = flat[start : start + v.size].reshape(v.shape)
            start += v.size
        return out

    def load_flat(self, flat: np.ndarray) -> None:
        for k, arr in self.unflatten(flat).items():
            self.entries[k].data = arr.copy()

    def flat_grad(self) -> np.ndarray:
        return np.concatenate(
            [np.zeros(v.size) if v.grad is None else v.grad.ravel() for v in self.entries.values()]
        )

    def zero_grad(self) -> None:
        T.zero_grad(self.entries.values())

    def copy(self) -> ParamSet:
        return ParamSet(
            self.name,
            {k: Tensor(v.data, requires_grad=True) for k, v in self.entries.items()},
            self.step_count,
            self.seed,
            dict(self.meta),
        )


def as_batch(img) -> np.ndarray:
    a = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim == 3:
        return a[:, None]
    if a.ndim != 4:
        raise ShapeError(f"expected an image or image batch, got shape {a.shape}")
    return a


def _batched(img) -> Tensor:
    if isinstance(img, Tensor):
        if img.data.ndim != 4:
            raise ShapeError(f"tensor inputs must be (N,C,H,W), got {img.shape}")
        return img
    return Tensor(as_batch(img))


def _require(params: ParamSet, name: str) -> None:
    if params is None or not params.entries:
        raise UsageError(f"{name} parameters are not initialized")
    if params.name != name:
        raise UsageError(f"expected {name} parameters, got {params.name}")


# --- architecture ------------------------------------------------------------------


def _fusion_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {"in.w": (WIDTH, 2, 3, 3), "in.b": (WIDTH,)}
    for blk in (1, 2):
        for i, _ in enumerate(DILATIONS):
            cin = WIDTH * (i + 1)
            shapes[f"drb{blk}.c{i}.w"] = (WIDTH, cin, 3, 3)
            shapes[f"drb{blk}.c{i}.b"] = (WIDTH,)
        shapes[f"drb{blk}.proj.w"] = (WIDTH, WIDTH * (len(DILATIONS) + 1), 1, 1)
        shapes[f"drb{blk}.proj.b"] = (WIDTH,)
    shapes["out.w"] = (1, WIDTH, 3, 3)
    shapes["out.b"] = (1,)
    return shapes


def _critic_shapes() -> dict[str, tuple[int, ...]]:
    shapes, cin = {}, 1
    for i, cout in enumerate(CRITIC_CHANNELS):
        shapes[f"c{i}.w"] = (cout, cin, 3, 3)
        shapes[f"c{i}.b"] = (cout,)
        cin = cout
    shapes["fc.w"] = (cin, 1)
    shapes["fc.b"] = (1,)
    return shapes


def _task_shapes(classes: int) -> dict[str, tuple[int, ...]]:
    shapes, cin = {}, 1
    for i, cout in enumerate((*TASK_CHANNELS, classes)):
        shapes[f"c{i}.w"] = (cout, cin, 3, 3)
        shapes[f"c{i}.b"] = (cout,)
        cin = cout
    return shapes


def param_shapes(name: str, classes: int = 3) -> dict[str, tuple[int, ...]]:
    if name == "omega":
        return _fusion_shapes()
    if name == "theta_V":
        return _critic_shapes()
    if name == "theta_P":
        if classes < 2:
            raise ConfigError(f"class count must be >= 2, got {classes}")
        return _task_shapes(classes)
    raise ConfigError(f"unknown parameter set {name!r}")


def init_params(name: str, seed: int, classes: int = 3) -> ParamSet:
    """Kaiming-normal weights (std sqrt(2 / fan_in)), zero biases."""
    shapes = param_shapes(name, classes)
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1), spawn_key=(NAMES.index(name),)))
    entries = {}
    for key, shape in shapes.items():
        if key.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        entries[key] = Tensor(arr, requires_grad=True)
    meta = {"classes": classes} if name == "theta_P" else {}
    return ParamSet(name, entries, 0, int(seed), meta)


def zeros_like_params(name: str, classes: int = 3) -> ParamSet:
    entries = {k: Tensor(np.zeros(s), requires_grad=True) for k, s in param_shapes(name, classes).items()}
    return ParamSet(name, entries, meta={"classes": classes} if name == "theta_P" else {})


def _dense_residual_block(h: Tensor, p: ParamSet, blk: int) -> Tensor:
    feats = [h]
    for i, d in enumerate(DILATIONS):
        inp = feats[0] if i == 0 else T.concat(feats, axis=1)
        a = T.conv2d(inp, p[f"drb{blk}.c{i}.w"], p[f"drb{blk}.c{i}.b"], padding=d, dilation=d)
        feats.append(T.leaky_relu(a, SLOPE))
    mixed = T.conv2d(T.concat(feats, axis=1), p[f"drb{blk}.proj.w"], p[f"drb{blk}.proj.b"])
    return T.add(h, mixed)


def fusion_forward(x, y, omega: ParamSet) -> Tensor:
    """Fused image ``u`` in [0, 1] with shape (N, 1, H, W)."""
    _require(omega, "omega")
    xb, yb = _batched(x), _batched(y)
    if xb.shape != yb.shape or xb.shape[1] != 1:
        raise ShapeError(f"fusion inputs {xb.shape} and {yb.shape} must be equal single-channel batches")
    h = T.conv2d(T.concat([xb, yb], axis=1), omega["in.w"], omega["in.b"], padding=1)
    h = _dense_residual_block(h, omega, 1)
    h = _dense_residual_block(h, omega, 2)
    return T.sigmoid(T.conv2d(h, omega["out.w"], omega["out.b"], padding=1))


def discriminator_forward(u, theta_V: ParamSet) -> Tensor:
    """Critic score per sample, shape (N, 1)."""
    _require(theta_V, "theta_V")
    h = _batched(u)
    if min(h.shape[2:]) < 16:
        raise UsageError(f"critic needs spatial size >= 16, got {h.shape[2:]}")
    for i in range(len(CRITIC_CHANNELS)):
        h = T.leaky_relu(T.conv2d(h, theta_V[f"c{i}.w"], theta_V[f"c{i}.b"], stride=2, padding=1), SLOPE)
    pooled = T.mean(h, axis=(2, 3))
    return T.add(T.matmul(pooled, theta_V["fc.w"]), theta_V["fc.b"])


def task_forward(u, theta_P: ParamSet) -> Tensor:
    """Per-pixel class logits, shape (N, C, H, W)."""
    _require(theta_P, "theta_P")
    h = _batched(u)
    n_layers = len(TASK_CHANNELS) + 1
    for i in range(n_layers):
        h = T.conv2d(h, theta_P[f"c{i}.w"], theta_P[f"c{i}.b"], padding=1)
        if i < n_layers - 1:
            h = T.leaky_relu(h, SLOPE)
    return h


class FusionPass:
    """Taped fusion forward that can be pulled back with several cotangents.

    Each :meth:`pullback` returns d<cotangent, u>/d omega as a flat vector
    in ParamSet order; the forward is computed once.
    """

    def __init__(self, x, y, omega: ParamSet):
        self.omega = omega
        self.tape = Tape()
        with self.tape:
            self.u = fusion_forward(x, y, omega)

    @property
    def value(self) -> np.ndarray:
        return self.u.data

    def pullback(self, cotangent: np.ndarray) -> np.ndarray:
        if cotangent.shape != self.u.shape:
            raise ShapeError(f"cotangent {cotangent.shape} vs fused batch {self.u.shape}")
        self.omega.zero_grad()
        with self.tape:
            s = T.sum(T.mul(self.u, Tensor._wrap(cotangent, "cotangent")))
        self.tape.backward(s)
        # drop the seed records so repeated pullbacks do not grow the tape
        del self.tape.records[-2:]
        g = self.omega.flat_grad()
        self.omega.zero_grad()
        return g


# --- checkpoints ----------------------------------------------------------------


def save_params(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def dump_params(params: ParamSet) -> bytes:
    header = {
        "name": params.name,
        "entries": list(params.entries),
        "shapes": [list(v.shape) for v in params.entries.values()],
        "step_count": int(params.step_count),
        "seed": int(params.seed),
    }
    if params.meta:
        header["meta"] = params.meta
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    payload = params.flatten().astype("<f8").tobytes()
    return head + payload


def load_params(path) -> ParamSet:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    return parse_params(blob, str(path))


def parse_params(blob: bytes, source: str = "<bytes>") -> ParamSet:
    nl = blob.find(b"\n")
    if nl < 0:
        raise DataError(f"{source}: checkpoint header missing")
    try:
        header = json.loads(blob[:nl])
        names = header["entries"]
        shapes = [tuple(s) for s in header["shapes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{source}: malformed checkpoint header ({exc})") from None
    payload = blob[nl + 1 :]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(payload) != 8 * total:
        raise DataError(f"{source}: payload holds {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    entries, start = {}, 0
    for key, shape in zip(names, shapes):
        n = int(np.prod(shape))
        entries[key] = Tensor(flat[start : start + n].reshape(shape), requires_grad=True)
        start += n
    return ParamSet(header["name"], entries, header["step_count"], header["seed"], header.get("meta", {}))


def param_count(params: ParamSet | Iterable[Tensor]) -> int:
    tensors = params.tensors() if isinstance(params, ParamSet) else params
    return int(sum(t.size for t in tensors))

