"""Modality pairs: synthetic generation, binary PGM I/O and batching."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bilevel import Batch
from ..errors import DataError, LabelRangeError, PGMFormatError, ShapeMismatchError
from ..saliency import pseudo_fusion


@dataclass
class ModalityPair:
    """Registered infrared (``x``) / visible (``y``) images in [0, 1].

    ``m1``, ``m2`` and ``u_m`` are the saliency weights and pseudo fused
    target, filled in once by :func:`prepare`.
    """

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray | None = None
    id: str = ""
    m1: np.ndarray | None = field(default=None, repr=False)
    m2: np.ndarray | None = field(default=None, repr=False)
    u_m: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ShapeMismatchError(f"pair {self.id}: x {self.x.shape} and y {self.y.shape} differ")
        if self.labels is not None and self.labels.shape != self.x.shape:
            raise ShapeMismatchError(f"pair {self.id}: labels {self.labels.shape} vs images {self.x.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    def prepare(self, bins: int = 256) -> ModalityPair:
        pf = pseudo_fusion(self.x, self.y, bins)
        self.m1, self.m2, self.u_m = pf.m1, pf.m2, pf.u_m
        return self


# --- synthetic scenes ------------------------------------------------------------------------


def synth_pair(seed: int, size: int = 32, classes: int = 3) -> ModalityPair:
    """Deterministic scene with thermal targets (label 1) and a texture patch (label 2).

    Targets are bright in ``x`` (> 0.8) and dark in ``y`` (< 0.4); the texture
    patch carries strong stripes in ``y`` and a faint copy in ``x``.
    """
    if size < 16:
        raise DataError(f"synthetic size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min())
    y = 0.35 + 0.3 * ramp + 0.02 * rng.standard_normal((size, size))
    x = 0.15 + 0.15 * (1.0 - ramp) + 0.02 * rng.standard_normal((size, size))
    labels = np.zeros((size, size), dtype=np.int64)

    if classes > 2:
        h = rng.integers(size // 4, size // 2 + 1)
        w = rng.integers(size // 4, size // 2 + 1)
        r0 = rng.integers(0, size - h + 1)
        c0 = rng.integers(0, size - w + 1)
        freq = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        beta = rng.uniform(0, np.pi)
        stripes = np.sin(2 * np.pi * freq * (np.cos(beta) * xx + np.sin(beta) * yy) + phase)
        patch = np.zeros((size, size), dtype=bool)
        patch[r0 : r0 + h, c0 : c0 + w] = True
        y = np.where(patch, 0.5 + 0.4 * stripes, y)
        x = np.where(patch, 0.35 + 0.08 * stripes, x)
        labels[patch] = 2

    n_targets = rng.integers(1, 4)
    r_lo = max(2.0, size / 16)
    for _ in range(n_targets):
        radius = rng.uniform(r_lo, max(r_lo, size / 8))
        cy, cx = rng.uniform(radius, size - 1 - radius, size=2)
        dist = np.hypot(np.arange(size)[:, None] - cy, np.arange(size)[None, :] - cx)
        disc = dist <= radius
        profile = 1.0 - dist / (radius + 1.0)
        x = np.where(disc, 0.82 + 0.18 * profile, x)
        y = np.where(disc, 0.15 + 0.2 * rng.random((size, size)), y)
        labels[disc] = 1

    return ModalityPair(
        x=np.clip(x, 0.0, 1.0),
        y=np.clip(y, 0.0, 1.0),
        labels=labels,
        id=f"synth-{seed}",
    )


def synth_pairs(n: int, seed: int, size: int = 32, classes: int = 3, bins: int = 256) -> list[ModalityPair]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [synth_pair(int(s), size, classes).prepare(bins) for s in seeds]


# --- PGM (binary P5, maxval 255) ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path) -> np.ndarray:
    """Raw uint8 pixels of a binary P5 file with maxval 255."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    tokens, pos = [], 0
    for _ in range(4):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise PGMFormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PGMFormatError(f"{path}: unsupported magic {tokens[0]!r}, only binary P5 is accepted")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError(f"{path}: non-numeric PGM header fields") from None
    if width < 1 or height < 1:
        raise PGMFormatError(f"{path}: invalid size {width}x{height}")
    if maxval != 255:
        raise PGMFormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PGMFormatError(f"{path}: missing whitespace after PGM header")
    data = blob[pos + 1 :]
    if len(data) != width * height:
        raise PGMFormatError(f"{path}: {len(data)} data bytes, expected {width * height}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def to_bytes(img) -> np.ndarray:
    """Map [0, 1] floats to uint8 by rounding; integer arrays pass through."""
    a = np.asarray(img)
    if np.issubdtype(a.dtype, np.integer):
        if a.min(initial=0) < 0 or a.max(initial=0) > 255:
            raise DataError("integer pixels must lie in [0, 255]")
        return a.astype(np.uint8)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img) -> None:
    pix = to_bytes(img)
    if pix.ndim != 2:
        raise DataError(f"PGM needs a 2-D image, got shape {pix.shape}")
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def load_pair(path_x, path_y, path_labels=None, classes: int = 3, pair_id: str | None = None) -> ModalityPair:
    x = read_pgm(path_x).astype(np.float64) / 255.0
    y = read_pgm(path_y).astype(np.float64) / 255.0
    if x.shape != y.shape:
        raise ShapeMismatchError(f"{path_y}: shape {y.shape} differs from {path_x} {x.shape}")
    labels = None
    if path_labels is not None:
        raw = read_pgm(path_labels)
        if raw.shape != x.shape:
            raise ShapeMismatchError(f"{path_labels}: shape {raw.shape} differs from images {x.shape}")
        if raw.max() >= classes:
            raise LabelRangeError(f"{path_labels}: label {raw.max()} >= class count {classes}")
        labels = raw.astype(np.int64)
    return ModalityPair(x, y, labels, pair_id or Path(path_x).stem)


def load_dir(data_dir, classes: int = 3, bins: int = 256) -> list[ModalityPair]:
    """Pairs named ``<id>_ir.pgm`` / ``<id>_vis.pgm`` with optional ``<id>_label.pgm``."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    pairs = []
    for ir in sorted(root.glob("*_ir.pgm")):
        pid = ir.name[: -len("_ir.pgm")]
        vis = root / f"{pid}_vis.pgm"
        if not vis.exists():
            raise DataError(f"{vis}: missing visible image for {ir.name}")
        lab = root / f"{pid}_label.pgm"
        pairs.append(load_pair(ir, vis, lab if lab.exists() else None, classes, pid).prepare(bins))
    if not pairs:
        raise DataError(f"{root}: no *_ir.pgm files found")
    return pairs


def save_pair(pair: ModalityPair, data_dir) -> None:
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    write_pgm(root / f"{pair.id}_ir.pgm", pair.x)
    write_pgm(root / f"{pair.id}_vis.pgm", pair.y)
    if pair.labels is not None:
        write_pgm(root / f"{pair.id}_label.pgm", pair.labels.astype(np.uint8))


# --- splitting and batching ----------------------------------------------------------------------


def split_pairs(pairs: list, fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    n = len(pairs)
    if n < 2:
        raise DataError(f"need at least 2 pairs to split, got {n}")
    n_train = min(n - 1, max(1, int(round(n * fraction))))
    order = rng.permutation(n)
    return [pairs[i] for i in sorted(order[:n_train])], [pairs[i] for i in sorted(order[n_train:])]


def stack(pairs: list[ModalityPair]) -> Batch:
    if not pairs:
        raise DataError("empty batch")
    shapes = {p.shape for p in pairs}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"batch mixes image shapes {sorted(shapes)}")
    for p in pairs:
        if p.u_m is None:
            p.prepare()

    def cat(attr):
        return np.stack([getattr(p, attr) for p in pairs])[:, None]

    labels = None
    if all(p.labels is not None for p in pairs):
        labels = np.stack([p.labels for p in pairs])
    return Batch(cat("x"), cat("y"), cat("m1"), cat("m2"), cat("u_m"), labels, tuple(p.id for p in pairs))


class BatchSampler:
    """Reshuffles every epoch; an incomplete tail is dropped."""

    def __init__(self, pairs: list[ModalityPair], batch_size: int, rng: np.random.Generator):
        self.pairs = pairs
        self.size = min(batch_size, len(pairs))
        self.rng = rng
        self._queue: list[int] = []

    @property
    def per_epoch(self) -> int:
        return len(self.pairs) // self.size

    def next(self) -> Batch:
        if len(self._queue) < self.size:
            self._queue = list(self.rng.permutation(len(self.pairs)))
        idx, self._queue = self._queue[: self.size], self._queue[self.size :]
        return stack([self.pairs[i] for i in idx])
