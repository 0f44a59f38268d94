"""Datasets: IDX parsing, block downsampling, synthetic generators, splits.

Every dataset is a matrix of samples in [0, 1] plus optional
ground-truth factor columns (categorical factors expanded to dummy
variables).  Generators are pure functions of their seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class FactorSpec:
    names: list[str]
    kinds: list[str]  # "continuous" | "dummy"


@dataclass
class Dataset:
    samples: np.ndarray  # (N, M) in [0, 1]
    factors: np.ndarray | None = None  # (N, V)
    factor_spec: FactorSpec | None = None
    split: str = "all"
    provenance: str = ""
    image_side: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.factors is not None:
            self.factors = np.asarray(self.factors, dtype=np.float64)
            if len(self.factors) != len(self.samples):
                raise ContractError(
                    f"factor rows ({len(self.factors)}) != samples ({len(self.samples)})"
                )

    def __len__(self):
        return len(self.samples)

    def take(self, idx, split=None) -> "Dataset":
        return replace(
            self,
            samples=self.samples[idx],
            factors=None if self.factors is None else self.factors[idx],
            split=self.split if split is None else split,
        )


# ---------------------------------------------------------------------------
# IDX binary format


def parse_idx_images(blob: bytes) -> np.ndarray:
    if len(blob) < 16:
        raise IdxFormatError(f"image header truncated at offset {len(blob)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x} at offset 0")
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise IdxFormatError(
            f"image payload truncated: need {expected} bytes, have {len(blob)}"
            f" (offset {len(blob)})"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise IdxFormatError(f"label header truncated at offset {len(blob)}")
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{magic:08x} at offset 0")
    if len(blob) != 8 + count:
        raise IdxFormatError(
            f"label payload truncated: need {8 + count} bytes, have {len(blob)}"
            f" (offset {len(blob)})"
        )
    return np.frombuffer(blob, dtype=np.uint8, offset=8).copy()


def load_idx(image_blob: bytes, label_blob: bytes) -> Dataset:
    images = parse_idx_images(image_blob)
    labels = parse_idx_labels(label_blob)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    dummies = np.eye(10)[labels]
    spec = FactorSpec([f"class{i}" for i in range(10)], ["dummy"] * 10)
    side = images.shape[1]
    return Dataset(
        samples=images.reshape(len(images), -1),
        factors=dummies,
        factor_spec=spec,
        provenance="idx",
        image_side=side,
    )


def serialize_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    """Inverse of :func:`load_idx`; bit-exact on parsed inputs."""
    side = dataset.image_side
    if side is None:
        raise ContractError("dataset has no image side; cannot serialize to IDX")
    n = len(dataset)
    pixels = np.rint(dataset.samples * 255.0).astype(np.uint8)
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side)
    labels = np.argmax(dataset.factors, axis=1).astype(np.uint8)
    return header + pixels.tobytes(), struct.pack(">II", IDX_LABEL_MAGIC, n) + labels.tobytes()


# ---------------------------------------------------------------------------
# transforms


def downsample(dataset: Dataset, factor: int) -> Dataset:
    """Non-overlapping block averaging of square images."""
    side = dataset.image_side
    if side is None or side % factor:
        raise ContractError(f"image side {side} not divisible by factor {factor}")
    out = side // factor
    imgs = dataset.samples.reshape(-1, out, factor, out, factor)
    pooled = imgs.mean(axis=(2, 4))
    return replace(
        dataset,
        samples=pooled.reshape(len(dataset), out * out),
        image_side=out,
        provenance=f"{dataset.provenance}+down{factor}",
    )


def filter_classes(dataset: Dataset, classes: list[int]) -> Dataset:
    labels = np.argmax(dataset.factors, axis=1)
    keep = np.isin(labels, classes)
    return dataset.take(np.nonzero(keep)[0])


def split(dataset: Dataset, ratios, seed: int):
    """Deterministic permutation split; factor rows travel with samples."""
    ratios = tuple(float(r) for r in ratios)
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be non-negative and sum to 1: {ratios}")
    n = len(dataset)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    perm = np.random.default_rng(np.random.SeedSequence((seed, 929))).permutation(n)
    parts = (
        perm[:n_train],
        perm[n_train : n_train + n_val],
        perm[n_train + n_val :],
    )
    names = ("train", "val", "test")
    return tuple(dataset.take(idx, split=name) for idx, name in zip(parts, names))


# ---------------------------------------------------------------------------
# synthetic generators


SHAPE_KINDS = ("square", "circle", "triangle")


def _subpixel_grid(side: int, sub: int = 4) -> np.ndarray:
    # (side*side*sub*sub, 2) sample points in [0,1]^2, x = column direction
    base = np.arange(side)
    offs = (np.arange(sub) + 0.5) / sub
    cols = (base[:, None] + offs[None, :]).reshape(-1) / side  # (side*sub,)
    px, py = np.meshgrid(cols, cols, indexing="xy")
    return np.stack([px.ravel(), py.ravel()], axis=1)


def render_shape(side: int, x: float, y: float, scale: float, kind: int,
                 sub: int = 4) -> np.ndarray:
    """Anti-aliased coverage image of one shape; pure in its arguments."""
    pts = _subpixel_grid(side, sub)
    dx = pts[:, 0] - x
    dy = pts[:, 1] - y
    if kind == 0:  # square
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= scale
    elif kind == 1:  # circle
        inside = dx * dx + dy * dy <= scale * scale
    else:  # triangle: equilateral, apex up (negative y is up in image coords)
        angles = np.array([-np.pi / 2, np.pi / 6, 5 * np.pi / 6])
        vx = x + scale * np.cos(angles)
        vy = y + scale * np.sin(angles)
        inside = np.ones(len(pts), dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (vx[j] - vx[i]) * (pts[:, 1] - vy[i]) - (vy[j] - vy[i]) * (
                pts[:, 0] - vx[i]
            )
            inside &= cross >= 0
    cov = inside.reshape(side * sub, side * sub).astype(np.float64)
    return cov.reshape(side, sub, side, sub).mean(axis=(1, 3))


def gen_shapes2d(count: int, side: int = 16, seed: int = 0) -> Dataset:
    """Grayscale images of one shape with independent generative factors."""
    if side < 16:
        raise ContractError("shapes2d needs side >= 16")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 241)))
    xs = rng.uniform(0.30, 0.70, size=count)
    ys = rng.uniform(0.30, 0.70, size=count)
    scales = rng.uniform(0.12, 0.22, size=count)
    kinds = rng.integers(0, 3, size=count)
    samples = np.empty((count, side * side))
    for i in range(count):
        samples[i] = render_shape(side, xs[i], ys[i], scales[i], int(kinds[i])).ravel()
    dummies = np.eye(3)[kinds]
    factors = np.column_stack([xs, ys, scales, dummies])
    spec = FactorSpec(
        ["x", "y", "scale", "kind_square", "kind_circle", "kind_triangle"],
        ["continuous"] * 3 + ["dummy"] * 3,
    )
    return Dataset(samples, factors, spec, provenance=f"shapes2d(side={side},seed={seed})",
                   image_side=side)


def gmm2d_parameters(components: int):
    """Fixed, well-separated mixture geometry: means >= 6 sigma apart."""
    if components < 1:
        raise ContractError("components must be >= 1")
    if components == 1:
        return np.zeros((1, 2)), 1.0
    angles = 2.0 * np.pi * np.arange(components) / components
    means = 3.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    min_dist = 2.0 * 3.0 * np.sin(np.pi / components)
    return means, min_dist / 6.0


def gen_gmm2d_raw(count: int, components: int, seed: int):
    means, sigma = gmm2d_parameters(components)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 577)))
    ids = rng.integers(0, components, size=count)
    pts = means[ids] + sigma * rng.standard_normal((count, 2))
    return pts, ids, means, sigma


def gen_gmm2d(count: int, components: int, seed: int = 0) -> Dataset:
    """Planar mixture samples rescaled into [0, 1]^2; factor = component id."""
    pts, ids, _, _ = gen_gmm2d_raw(count, components, seed)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    scaled = (pts - lo) / span
    spec = FactorSpec(["component"], ["continuous"])
    return Dataset(scaled, ids[:, None].astype(np.float64), spec,
                   provenance=f"gmm2d(k={components},seed={seed})")


def load_digits8() -> Dataset:
    """Offline 8x8 handwritten digits (the scikit-learn copy of the UCI set).

    Serves as the desk-scale digit source when the full-resolution IDX
    files are not on disk.
    """
    from sklearn.datasets import load_digits

    bunch = load_digits()
    samples = bunch.images.reshape(len(bunch.images), -1) / 16.0
    dummies = np.eye(10)[bunch.target]
    spec = FactorSpec([f"class{i}" for i in range(10)], ["dummy"] * 10)
    return Dataset(samples, dummies, spec, provenance="digits8", image_side=8)


def load_mnist_dir(path, downsample_factor: int = 2) -> Dataset:
    """Parse the canonical IDX pair from a directory, then block-average."""
    root = Path(path)
    images = root / "train-images-idx3-ubyte"
    labels = root / "train-labels-idx1-ubyte"
    for f in (images, labels):
        if not f.exists():
            raise ContractError(f"IDX file not found: {f}")
    ds = load_idx(images.read_bytes(), labels.read_bytes())
    ds = replace(ds, provenance="mnist")
    if downsample_factor > 1:
        ds = downsample(ds, downsample_factor)
    return ds


def build_dataset(section, seed: int):
    """Resolve a config [data] section into (train, val, test)."""
    name = section.dataset
    if name == "gmm2d":
        ds = gen_gmm2d(section.count, section.components, seed)
    elif name == "shapes2d":
        ds = gen_shapes2d(section.count, section.side, seed)
    elif name == "digits8":
        ds = load_digits8()
    elif name == "mnist":
        ds = load_mnist_dir(section.path, section.downsample)
    else:
        raise ContractError(f"unknown dataset {name!r}")
    if section.classes.strip():
        ds = filter_classes(ds, [int(c) for c in section.classes.split(",")])
    if section.subsample and section.subsample < len(ds):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 347)))
        idx = rng.choice(len(ds), size=section.subsample, replace=False)
        ds = ds.take(np.sort(idx))
    ratios = tuple(float(r) for r in section.ratios.split(","))
    return split(ds, ratios, seed)
