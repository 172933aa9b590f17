"""Desk-scale datasets: procedural mini-dSprites, IDX files, batching."""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .metrics import FactorTable

ROLES = ("shape", "scale", "pos_x", "pos_y", "rotation")
SHAPES = ("square", "ellipse", "cross")
SCALES = (0.5, 0.7, 0.9)
ELLIPSE_ASPECT = 0.6
CROSS_BAR = 1.0 / 3.0

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class GenerationError(ValueError):
    pass


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int
    role: str

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError(f"factor {self.name!r} needs cardinality >= 1")
        if self.role not in ROLES:
            raise ValueError(f"unknown renderer role {self.role!r}")
        if self.role == "shape" and self.cardinality > len(SHAPES):
            raise ValueError(f"only {len(SHAPES)} shapes are available")


DEFAULT_SPECS = (
    FactorSpec("shape", 3, "shape"),
    FactorSpec("scale", 3, "scale"),
    FactorSpec("pos_x", 4, "pos_x"),
    FactorSpec("pos_y", 4, "pos_y"),
)

# layer i's supervision target, coarse to fine
SUPERVISED_FACTORS = ("scale", "pos_x", "shape")


@dataclass
class Dataset:
    images: np.ndarray  # (n, H*W) in [0, 1]
    factors: FactorTable
    resolution: tuple[int, int]

    def __post_init__(self):
        if self.images.shape[0] != len(self.factors):
            raise ValueError("image and factor row counts differ")

    def __len__(self):
        return self.images.shape[0]

    @property
    def data_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.factors.subset(idx), self.resolution)

    def labels(self, names: Sequence[str]) -> list[np.ndarray]:
        return [self.factors.column(n) for n in names]


def factor_values(spec: FactorSpec, resolution: int, rotated: bool = False) -> np.ndarray:
    """Physical value taken by each level of a factor.  Positions keep the
    largest sprite on canvas (its rotated bounding circle when ``rotated``)."""
    n = spec.cardinality
    if spec.role == "shape":
        return np.arange(n, dtype=float)
    if spec.role == "scale":
        return np.array(SCALES[:n]) if n <= len(SCALES) else np.linspace(SCALES[0], SCALES[-1], n)
    if spec.role in ("pos_x", "pos_y"):
        half = resolution / 4 * (np.sqrt(2) if rotated else 1.0)
        return np.linspace(half, resolution - half, n) if n > 1 else np.array([resolution / 2])
    return np.linspace(0.0, np.pi / 2, n, endpoint=False)  # rotation; all shapes have 90-degree symmetry


def rasterize(shape: str, scale: float, cx: float, cy: float, angle: float, resolution: int) -> np.ndarray:
    """Binary image of one sprite.  The maximum extent is half the canvas, so
    a sprite's side is ``scale * resolution / 2`` pixels.  Pixel centres are
    tested for inclusion (no anti-aliasing)."""
    half = scale * resolution / 4
    reach = half * (np.sqrt(2) if angle else 1.0)
    if cx - reach < 0 or cx + reach > resolution or cy - reach < 0 or cy + reach > resolution:
        raise GenerationError(
            f"{shape} at scale {scale} centred ({cx:.2f}, {cy:.2f}) leaves the {resolution}x{resolution} canvas"
        )
    coords = np.arange(resolution) + 0.5
    py, px = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = px - cx, py - cy
    if angle:
        c, s = np.cos(angle), np.sin(angle)
        dx, dy = c * dx + s * dy, -s * dx + c * dy
    if shape == "square":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape == "ellipse":
        inside = (dx / half) ** 2 + (dy / (ELLIPSE_ASPECT * half)) ** 2 <= 1.0
    elif shape == "cross":
        bar = CROSS_BAR * half
        box = (np.abs(dx) <= half) & (np.abs(dy) <= half)
        inside = box & ((np.abs(dx) <= bar) | (np.abs(dy) <= bar))
    else:
        raise GenerationError(f"unknown shape {shape!r}")
    return inside.astype(np.float64)


def gen_minidsprites(specs: Sequence[FactorSpec] = DEFAULT_SPECS, resolution: int = 32, seed: int = 0) -> Dataset:
    """Render every combination of factor levels (row-major over ``specs``).

    Rendering is fully determined by the specs; ``seed`` is accepted so
    dataset construction has the same signature as the stochastic loaders.
    """
    del seed
    if resolution not in (32, 64):
        raise ValueError("resolution must be 32 or 64")
    specs = list(specs)
    roles = [s.role for s in specs]
    if len(set(roles)) != len(roles):
        raise ValueError("each renderer role may appear once")
    total = int(np.prod([s.cardinality for s in specs]))
    if total > 1_000_000:
        raise ValueError(f"factorial grid of {total} images is too large")

    rotated = "rotation" in roles
    values = {s.role: factor_values(s, resolution, rotated) for s in specs}
    defaults = {"shape": 0.0, "scale": SCALES[-1], "pos_x": resolution / 2, "pos_y": resolution / 2, "rotation": 0.0}
    grid = np.array(list(itertools.product(*[range(s.cardinality) for s in specs])), dtype=np.int64)
    grid = grid.reshape(total, len(specs))
    images = np.empty((total, resolution * resolution))
    for row, levels in enumerate(grid):
        v = dict(defaults)
        v.update({s.role: values[s.role][lvl] for s, lvl in zip(specs, levels)})
        img = rasterize(SHAPES[int(v["shape"])], v["scale"], v["pos_x"], v["pos_y"], v["rotation"], resolution)
        images[row] = img.reshape(-1)
    table = FactorTable(grid, tuple(s.name for s in specs), tuple(s.cardinality for s in specs))
    return Dataset(images, table, (resolution, resolution))


def replicate(dataset: Dataset, min_size: int) -> Dataset:
    reps = -(-min_size // len(dataset))
    return dataset.subset(np.tile(np.arange(len(dataset)), reps))


def split(dataset: Dataset, holdout: float, seed: int) -> tuple[Dataset, Dataset]:
    idx = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(len(dataset) * (1 - holdout)))
    return dataset.subset(np.sort(idx[:cut])), dataset.subset(np.sort(idx[cut:]))


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epochs: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(indices, images, factors)`` full batches; the last short batch
    of each epoch is dropped.  Epoch ``e`` is shuffled with ``(seed, e)``."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size must be in [1, {n}]")
    epoch_range = itertools.count() if epochs is None else range(epochs)
    for epoch in epoch_range:
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield idx, dataset.images[idx], dataset.factors.factors[idx]


# --- IDX ---------------------------------------------------------------------


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only unsigned byte IDX files are written")
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte {len(raw)}")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08:
        raise IdxFormatError(f"{path}: bad magic {raw[:4].hex()} at byte 0")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{path}: truncated dimension block at byte {len(raw)}")
    shape = struct.unpack(f">{ndim}I", raw[4:end])
    need = end + int(np.prod(shape))
    if len(raw) != need:
        raise IdxFormatError(f"{path}: expected {need} bytes, file ends at byte {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=end).reshape(shape)


def load_idx(images_path, labels_path=None) -> Dataset:
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: image file must be 3-dimensional (magic {IMAGES_MAGIC:#010x})")
    n, h, w = images.shape
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError(f"{labels_path}: label file must be 1-dimensional (magic {LABELS_MAGIC:#010x})")
        if len(labels) != n:
            raise IdxFormatError(f"{labels_path}: {len(labels)} labels for {n} images (count at byte 4)")
        table = FactorTable(labels.reshape(-1, 1).astype(np.int64), ("label",), (int(labels.max()) + 1,))
    else:
        table = FactorTable(np.zeros((n, 0), dtype=np.int64), (), ())
    return Dataset(images.reshape(n, h * w).astype(np.float64) / 255.0, table, (h, w))


def export_dataset(dataset: Dataset, out_dir) -> None:
    """Write ``images.idx`` (unsigned bytes, 0/255) and a ``factors.json`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h, w = dataset.resolution
    pixels = np.round(dataset.images * 255).astype(np.uint8).reshape(len(dataset), h, w)
    write_idx(out / "images.idx", pixels)
    sidecar = {
        "names": list(dataset.factors.names),
        "cardinalities": list(dataset.factors.cardinalities),
        "factors": dataset.factors.factors.tolist(),
    }
    (out / "factors.json").write_text(json.dumps(sidecar))


def load_dataset_dir(path) -> Dataset:
    path = Path(path)
    images = load_idx(path / "images.idx")
    meta = json.loads((path / "factors.json").read_text())
    table = FactorTable(np.asarray(meta["factors"], dtype=np.int64).reshape(len(images), -1), meta["names"], meta["cardinalities"])
    return Dataset(images.images, table, images.resolution)


def specs_from_json(obj: dict) -> tuple[list[FactorSpec], int]:
    allowed = {"factors", "resolution", "seed"}
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown keys in dataset spec: {sorted(unknown)}")
    specs = [FactorSpec(f["name"], int(f["cardinality"]), f.get("role", f["name"])) for f in obj.get("factors", [])]
    return specs or list(DEFAULT_SPECS), int(obj.get("resolution", 32))
