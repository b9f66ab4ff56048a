"""Scene data: raster containers, derived 3-channel representations, patch
tiling, sparse labels, and a synthetic scene generator.

All derived representations are float32 images in [-1, 1] produced by a
per-band percentile stretch followed by an affine map to the signed range,
so they are directly consumable by the denoiser.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, gaussian_filter1d

from .conditioning import MODALITY_ORDER, Modality

RASTER_MAGIC = b"URDS"
RASTER_VERSION = 1
RASTER_DTYPE_FLOAT32 = 0

STRETCH_LO = 2.0
STRETCH_HI = 98.0
DEGENERATE_SPAN = 1e-12
PRGB_TARGETS_NM = (650.0, 550.0, 450.0)

DEFAULT_PATCH_SIZE = 64
DEFAULT_STRIDE = 32


class RasterFormatError(Exception):
    """Malformed raster file; ``byte_offset`` locates the first bad byte."""

    def __init__(self, message: str, byte_offset: int) -> None:
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


@dataclass
class RasterStack:
    """A (H, W, C) float32 image stack, optionally with per-band wavelengths in nm."""

    values: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"values must be (H, W, C), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("raster values must be finite")
        self.values = np.ascontiguousarray(v, dtype=np.float32)
        if self.wavelengths is not None:
            wl = np.ascontiguousarray(self.wavelengths, dtype=np.float32)
            if wl.shape != (self.values.shape[2],):
                raise ValueError(
                    f"wavelengths shape {wl.shape} does not match {self.values.shape[2]} bands"
                )
            self.wavelengths = wl

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass
class SparseLabelSet:
    """Point labels on the scene grid; class ids are 1..K, 0 means unlabeled."""

    rows: np.ndarray
    cols: np.ndarray
    classes: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        self.cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        self.classes = np.ascontiguousarray(self.classes, dtype=np.int64)
        if not (self.rows.shape == self.cols.shape == self.classes.shape):
            raise ValueError("rows, cols and classes must share shape")
        if self.rows.ndim != 1:
            raise ValueError("label arrays must be one-dimensional")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(self.classes) and (self.classes.min() < 1 or self.classes.max() > self.num_classes):
            raise ValueError(f"class ids must lie in [1, {self.num_classes}]")
        coords = np.stack([self.rows, self.cols])
        if coords.shape[1] != np.unique(coords, axis=1).shape[1]:
            raise ValueError(f"duplicate labeled coordinates in split {self.split!r}")

    def __len__(self) -> int:
        return len(self.rows)

    def validate_bounds(self, height: int, width: int) -> None:
        if len(self.rows) == 0:
            return
        if self.rows.min() < 0 or self.rows.max() >= height:
            raise ValueError(f"label row outside [0, {height})")
        if self.cols.min() < 0 or self.cols.max() >= width:
            raise ValueError(f"label col outside [0, {width})")

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.classes, minlength=self.num_classes + 1)[1:]


@dataclass
class SceneBundle:
    """Raw stacks, the three derived representations, and both label splits."""

    hsi: RasterStack
    sar: RasterStack
    prgb: RasterStack
    pca3: RasterStack
    sar3: RasterStack
    train_labels: SparseLabelSet
    test_labels: SparseLabelSet
    num_classes: int
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        h, w = self.hsi.height, self.hsi.width
        for name in ("sar", "prgb", "pca3", "sar3"):
            stack: RasterStack = getattr(self, name)
            if (stack.height, stack.width) != (h, w):
                raise ValueError(f"{name} shape differs from hsi ({h}, {w})")
        for stack in (self.prgb, self.pca3, self.sar3):
            if stack.channels != 3:
                raise ValueError("derived representations must have 3 channels")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        for labels in (self.train_labels, self.test_labels):
            if labels.num_classes != self.num_classes:
                raise ValueError("label split disagrees on num_classes")
            labels.validate_bounds(h, w)
        self.class_names = tuple(self.class_names)

    @property
    def height(self) -> int:
        return self.hsi.height

    @property
    def width(self) -> int:
        return self.hsi.width

    def labels(self, split: str) -> SparseLabelSet:
        if split == "train":
            return self.train_labels
        if split == "test":
            return self.test_labels
        raise ValueError(f"unknown split {split!r}")

    def representation(self, m: Modality) -> np.ndarray:
        return {
            Modality.PRGB: self.prgb,
            Modality.PCA: self.pca3,
            Modality.SAR: self.sar3,
        }[Modality(int(m))].values


@dataclass(frozen=True)
class PatchGrid:
    """Patch origins covering an image; the last origin per axis is clamped
    flush to the border when size - patch is not a stride multiple."""

    patch_size: int
    stride: int
    height: int
    width: int
    origins: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.origins)


def axis_origins(length: int, patch: int, stride: int) -> list[int]:
    if patch > length:
        raise ValueError(f"patch size {patch} exceeds axis length {length}")
    origins = list(range(0, length - patch + 1, stride))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def make_grid(height: int, width: int, patch_size: int, stride: int) -> PatchGrid:
    if stride < 1 or stride > patch_size:
        raise ValueError(f"stride must lie in [1, patch_size], got {stride}")
    origins = tuple(
        (r, c)
        for r in axis_origins(height, patch_size, stride)
        for c in axis_origins(width, patch_size, stride)
    )
    return PatchGrid(patch_size, stride, height, width, origins)


def tile_patches(
    values: np.ndarray,
    patch_size: int = DEFAULT_PATCH_SIZE,
    stride: int = DEFAULT_STRIDE,
) -> tuple[PatchGrid, np.ndarray]:
    """Cut (H, W, C) into overlapping (P, S, S, C) patches covering every pixel."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"expected (H, W, C), got shape {values.shape}")
    grid = make_grid(values.shape[0], values.shape[1], patch_size, stride)
    s = patch_size
    patches = np.stack([values[r : r + s, c : c + s] for r, c in grid.origins])
    return grid, patches


def merge_overlaps(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Per-pixel arithmetic mean of overlapping (P, S, S, C) patch maps."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4 or patches.shape[0] != len(grid):
        raise ValueError(f"expected ({len(grid)}, S, S, C) patches, got {patches.shape}")
    s = grid.patch_size
    if patches.shape[1:3] != (s, s):
        raise ValueError("patch spatial size disagrees with grid")
    acc = np.zeros((grid.height, grid.width, patches.shape[3]), dtype=np.float64)
    count = np.zeros((grid.height, grid.width, 1), dtype=np.float64)
    for patch, (r, c) in zip(patches, grid.origins):
        acc[r : r + s, c : c + s] += patch
        count[r : r + s, c : c + s] += 1.0
    if (count == 0).any():
        raise ValueError("grid does not cover every pixel")
    return acc / count


def percentile_stretch(
    band: np.ndarray,
    lo: float = STRETCH_LO,
    hi: float = STRETCH_HI,
) -> np.ndarray:
    """Clip to the [lo, hi] percentile window and rescale to [0, 1].

    Percentiles use linear interpolation.  A window narrower than 1e-12
    (constant band) maps everything to 0.5.
    """
    band = np.asarray(band, dtype=np.float64)
    p_lo, p_hi = np.percentile(band, [lo, hi])
    span = p_hi - p_lo
    if span < DEGENERATE_SPAN:
        return np.full(band.shape, 0.5)
    return np.clip((band - p_lo) / span, 0.0, 1.0)


def stretch_to_signed(band: np.ndarray, lo: float = STRETCH_LO, hi: float = STRETCH_HI) -> np.ndarray:
    return 2.0 * percentile_stretch(band, lo, hi) - 1.0


def _stack_signed(bands: list[np.ndarray]) -> np.ndarray:
    return np.stack([stretch_to_signed(b) for b in bands], axis=-1).astype(np.float32)


def select_prgb_bands(
    wavelengths: np.ndarray,
    targets: tuple[float, float, float] = PRGB_TARGETS_NM,
) -> tuple[int, int, int]:
    """Nearest band index per target wavelength; ties take the lower index."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    return tuple(int(np.argmin(np.abs(wl - t))) for t in targets)


def hsi_to_prgb(
    stack: RasterStack,
    band_indices: tuple[int, int, int] | None = None,
    targets: tuple[float, float, float] = PRGB_TARGETS_NM,
) -> RasterStack:
    """Pseudo-RGB anchor: three bands picked by wavelength (or given indices),
    each stretched to [-1, 1]."""
    if band_indices is None:
        if stack.wavelengths is None:
            raise ValueError("band_indices are required when the stack has no wavelengths")
        band_indices = select_prgb_bands(stack.wavelengths, targets)
    if len(band_indices) != 3:
        raise ValueError("exactly three band indices are required")
    for idx in band_indices:
        if not 0 <= int(idx) < stack.channels:
            raise ValueError(f"band index {idx} outside [0, {stack.channels})")
    bands = [stack.values[:, :, int(i)] for i in band_indices]
    return RasterStack(values=_stack_signed(bands))


def pca3_decomposition(stack: RasterStack):
    """Top-3 spectral principal components before any stretching.

    Returns (scores, loadings, eigenvalues): scores is (H, W, 3) with
    rank-deficient components as all-zero planes, loadings is (C, 3) with a
    zero column per deficient component, eigenvalues is (3,).  Components are
    ordered by descending eigenvalue; each loading's sign is fixed so its
    largest-magnitude entry is positive.
    """
    h, w, c = stack.values.shape
    x = stack.values.reshape(-1, c).astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / max(x.shape[0] - 1, 1)
    eigvals_all, eigvecs_all = np.linalg.eigh(cov)
    order = np.argsort(eigvals_all)[::-1][: min(3, c)]
    top_vals = np.clip(eigvals_all[order], 0.0, None)
    top_vecs = eigvecs_all[:, order]

    tol = (top_vals[0] if len(top_vals) else 0.0) * 1e-10
    scores = np.zeros((h, w, 3))
    loadings = np.zeros((c, 3))
    eigvals = np.zeros(3)
    deficient = 0
    for k in range(3):
        if k >= len(top_vals) or top_vals[k] <= tol:
            deficient += 1
            continue
        vec = top_vecs[:, k]
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        loadings[:, k] = vec
        eigvals[k] = top_vals[k]
        scores[:, :, k] = (x @ vec).reshape(h, w)
    if deficient:
        warnings.warn(
            f"spectral rank below 3; {deficient} component(s) filled with a constant",
            RuntimeWarning,
            stacklevel=2,
        )
    return scores, loadings, eigvals


def hsi_to_pca3(stack: RasterStack) -> RasterStack:
    """Top-3 principal components of the spectra, each stretched to [-1, 1].

    Rank-deficient components become constant zero (the signed image of a 0.5
    plane, since the zero plane hits the degenerate-window rule) with a
    warning; see ``pca3_decomposition`` for ordering and sign conventions.
    """
    scores, _, eigvals = pca3_decomposition(stack)
    out = np.stack(
        [
            np.zeros(scores.shape[:2]) if eigvals[k] == 0.0 else stretch_to_signed(scores[:, :, k])
            for k in range(3)
        ],
        axis=-1,
    ).astype(np.float32)
    return RasterStack(values=out)


def sar_composite_bands(stack: RasterStack) -> np.ndarray:
    """Raw 3-channel SAR combination before stretching.

    Quad-pol input is channel-ordered (HH, HV, VH, VV) and maps to the
    Pauli-style triplet (|HH+VV|, |HH-VV|, |HV+VH|) / sqrt(2); dual-pol input
    (VV, VH) maps to (VV, VH, (VV+VH)/2).
    """
    v = stack.values.astype(np.float64)
    if stack.channels == 4:
        hh, hv, vh, vv = (v[:, :, i] for i in range(4))
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        bands = [
            np.abs(hh + vv) * inv_sqrt2,
            np.abs(hh - vv) * inv_sqrt2,
            np.abs(hv + vh) * inv_sqrt2,
        ]
    elif stack.channels == 2:
        vv, vh = v[:, :, 0], v[:, :, 1]
        bands = [vv, vh, 0.5 * (vv + vh)]
    else:
        raise ValueError(f"SAR stack must have 2 or 4 channels, got {stack.channels}")
    return np.stack(bands, axis=-1)


def sar_to_pauli(stack: RasterStack) -> RasterStack:
    """SAR composite with each combined channel stretched to [-1, 1]."""
    combined = sar_composite_bands(stack)
    return RasterStack(values=_stack_signed([combined[:, :, i] for i in range(3)]))


# ---------------------------------------------------------------------------
# Raster container


def save_raster(path, stack: RasterStack) -> None:
    """Write the raster container: header, optional wavelength block, then the
    payload planar band by band (little-endian float32)."""
    h, w, c = stack.values.shape
    blob = bytearray()
    blob += struct.pack(
        "<4sHIIIBB",
        RASTER_MAGIC,
        RASTER_VERSION,
        h,
        w,
        c,
        RASTER_DTYPE_FLOAT32,
        1 if stack.wavelengths is not None else 0,
    )
    if stack.wavelengths is not None:
        blob += np.ascontiguousarray(stack.wavelengths, dtype="<f4").tobytes()
    planar = np.ascontiguousarray(np.moveaxis(stack.values, 2, 0), dtype="<f4")
    blob += planar.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_raster(path) -> RasterStack:
    data = Path(path).read_bytes()
    header_fmt = "<4sHIIIBB"
    header_size = struct.calcsize(header_fmt)
    if len(data) < header_size:
        raise RasterFormatError("file shorter than header", len(data))
    magic, version, h, w, c, dtype_code, has_wl = struct.unpack(header_fmt, data[:header_size])
    if magic != RASTER_MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}, expected {RASTER_MAGIC!r}", 0)
    if version != RASTER_VERSION:
        raise RasterFormatError(f"unsupported version {version}", 4)
    if dtype_code != RASTER_DTYPE_FLOAT32:
        raise RasterFormatError(f"unknown dtype code {dtype_code}", 18)
    pos = header_size
    wavelengths = None
    if has_wl:
        nbytes = 4 * c
        if pos + nbytes > len(data):
            raise RasterFormatError("truncated wavelength block", pos)
        wavelengths = np.frombuffer(data, dtype="<f4", count=c, offset=pos).copy()
        pos += nbytes
    expected = 4 * h * w * c
    if pos + expected > len(data):
        raise RasterFormatError("truncated payload", pos)
    planar = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=pos)
    values = np.moveaxis(planar.reshape(c, h, w), 0, 2).copy()
    return RasterStack(values=values, wavelengths=wavelengths)


def describe_raster(path) -> dict:
    stack = load_raster(path)
    return {
        "path": str(path),
        "format": "raster-container-v1",
        "height": stack.height,
        "width": stack.width,
        "channels": stack.channels,
        "has_wavelengths": stack.wavelengths is not None,
        "value_range": [float(stack.values.min()), float(stack.values.max())],
    }


# ---------------------------------------------------------------------------
# Label CSV

LABEL_HEADER = ["row", "col", "class_id"]


def save_labels(path, labels: SparseLabelSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_HEADER)
        for r, c, y in zip(labels.rows, labels.cols, labels.classes):
            writer.writerow([int(r), int(c), int(y)])


def load_labels(
    path,
    height: int,
    width: int,
    num_classes: int,
    split: str = "train",
) -> SparseLabelSet:
    """Read the point-label CSV; errors cite the 1-based file line."""
    rows, cols, classes = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty label file") from None
        if [h.strip() for h in header] != LABEL_HEADER:
            raise ValueError(f"{path}: line 1: expected header {','.join(LABEL_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}: line {line_no}: expected 3 fields, got {len(row)}")
            try:
                r, c, y = (int(v) for v in row)
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: non-integer field") from None
            if not 0 <= r < height:
                raise ValueError(f"{path}: line {line_no}: row {r} outside [0, {height})")
            if not 0 <= c < width:
                raise ValueError(f"{path}: line {line_no}: col {c} outside [0, {width})")
            if not 1 <= y <= num_classes:
                raise ValueError(
                    f"{path}: line {line_no}: class {y} outside [1, {num_classes}]"
                )
            rows.append(r)
            cols.append(c)
            classes.append(y)
    return SparseLabelSet(
        rows=np.array(rows, dtype=np.int64),
        cols=np.array(cols, dtype=np.int64),
        classes=np.array(classes, dtype=np.int64),
        num_classes=num_classes,
        split=split,
    )


# ---------------------------------------------------------------------------
# Scene directory

SCENE_MANIFEST = "scene.json"


def save_scene(scene: SceneBundle, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_raster(directory / "hsi.urds", scene.hsi)
    save_raster(directory / "sar.urds", scene.sar)
    save_raster(directory / "prgb.urds", scene.prgb)
    save_raster(directory / "pca3.urds", scene.pca3)
    save_raster(directory / "sar3.urds", scene.sar3)
    save_labels(directory / "labels_train.csv", scene.train_labels)
    save_labels(directory / "labels_test.csv", scene.test_labels)
    manifest = {
        "num_classes": scene.num_classes,
        "class_names": list(scene.class_names),
        "height": scene.height,
        "width": scene.width,
        "meta": scene.meta,
    }
    (directory / SCENE_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_scene(directory) -> SceneBundle:
    directory = Path(directory)
    manifest_path = directory / SCENE_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; not a scene directory")
    manifest = json.loads(manifest_path.read_text())
    num_classes = int(manifest["num_classes"])
    height, width = int(manifest["height"]), int(manifest["width"])
    return SceneBundle(
        hsi=load_raster(directory / "hsi.urds"),
        sar=load_raster(directory / "sar.urds"),
        prgb=load_raster(directory / "prgb.urds"),
        pca3=load_raster(directory / "pca3.urds"),
        sar3=load_raster(directory / "sar3.urds"),
        train_labels=load_labels(
            directory / "labels_train.csv", height, width, num_classes, "train"
        ),
        test_labels=load_labels(
            directory / "labels_test.csv", height, width, num_classes, "test"
        ),
        num_classes=num_classes,
        class_names=tuple(manifest["class_names"]),
        meta=manifest.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# Synthetic scenes


def synth_scene(
    seed: int,
    height: int = 192,
    width: int = 192,
    num_classes: int = 6,
    bands: int = 48,
    train_fraction: float = 0.005,
    sar_mode: str = "dual",
) -> SceneBundle:
    """Deterministic synthetic scene: a smooth class layout, per-class spectra
    with noise, class-correlated speckled SAR backscatter, and two disjoint
    label splits (sparse imbalanced train, roughly balanced test)."""
    if not 0.0 < train_fraction < 0.01:
        raise ValueError("train_fraction must lie in (0, 0.01)")
    if sar_mode not in ("dual", "quad"):
        raise ValueError(f"sar_mode must be 'dual' or 'quad', got {sar_mode!r}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    k = num_classes
    smooth = min(height, width) / 6.0

    # Smooth competing fields; argmax gives contiguous class regions.  Boost
    # starved classes until each holds enough pixels for both label splits.
    fields = gaussian_filter(
        rng.standard_normal((k, height, width)), sigma=(0, smooth, smooth)
    )
    min_area = 8 * max(10, int(0.025 * height * width / k))
    for _ in range(200):
        class_map = fields.argmax(axis=0)
        areas = np.bincount(class_map.ravel(), minlength=k)
        if areas.min() >= min(min_area, height * width // (2 * k)):
            break
        fields[areas.argmin()] += 0.05
    class_map = fields.argmax(axis=0)

    wavelengths = np.linspace(430.0, 2450.0, bands).astype(np.float32)
    signatures = gaussian_filter1d(rng.standard_normal((k, bands)), sigma=bands / 12.0, axis=1)
    signatures = 0.5 + 0.35 * signatures / (np.abs(signatures).max() + 1e-9)
    illum = 1.0 + 0.08 * gaussian_filter(rng.standard_normal((height, width)), sigma=smooth / 1.5)
    hsi_values = signatures[class_map] * illum[:, :, None]
    hsi_values += rng.normal(0.0, 0.015, size=hsi_values.shape)
    hsi = RasterStack(
        values=np.clip(hsi_values, 0.0, 1.0).astype(np.float32), wavelengths=wavelengths
    )

    n_pol = 2 if sar_mode == "dual" else 4
    backscatter = rng.uniform(0.15, 0.85, size=(k, n_pol))
    speckle = rng.gamma(shape=4.0, scale=0.25, size=(height, width, n_pol))
    sar_values = backscatter[class_map] * speckle
    sar = RasterStack(values=np.clip(sar_values, 0.0, 4.0).astype(np.float32))

    train_labels, test_labels = _synth_labels(rng, class_map, k, train_fraction)

    return SceneBundle(
        hsi=hsi,
        sar=sar,
        prgb=hsi_to_prgb(hsi),
        pca3=hsi_to_pca3(hsi),
        sar3=sar_to_pauli(sar),
        train_labels=train_labels,
        test_labels=test_labels,
        num_classes=k,
        class_names=tuple(f"class_{i}" for i in range(1, k + 1)),
        meta={"seed": int(seed), "sar_mode": sar_mode, "synthetic": True},
    )


def _synth_labels(
    rng: np.random.Generator,
    class_map: np.ndarray,
    num_classes: int,
    train_fraction: float,
):
    height, width = class_map.shape
    total_train = max(num_classes * 4, int(round(train_fraction * height * width)))
    proportions = rng.dirichlet(np.full(num_classes, 0.8))
    train_counts = np.maximum(4, np.round(proportions * total_train).astype(int))
    test_per_class = max(30, int(0.025 * height * width / num_classes))

    tr_r, tr_c, tr_y = [], [], []
    te_r, te_c, te_y = [], [], []
    for cls in range(num_classes):
        coords = np.argwhere(class_map == cls)
        rng.shuffle(coords)
        n_train = int(min(train_counts[cls], max(1, len(coords) // 4)))
        n_test = int(min(test_per_class, len(coords) - n_train))
        if n_train < 1 or n_test < 1:
            raise RuntimeError(f"synthetic layout starved class {cls + 1}")
        take_train = coords[:n_train]
        take_test = coords[n_train : n_train + n_test]
        tr_r.extend(take_train[:, 0])
        tr_c.extend(take_train[:, 1])
        tr_y.extend([cls + 1] * n_train)
        te_r.extend(take_test[:, 0])
        te_c.extend(take_test[:, 1])
        te_y.extend([cls + 1] * n_test)

    train = SparseLabelSet(
        rows=np.array(tr_r), cols=np.array(tr_c), classes=np.array(tr_y),
        num_classes=num_classes, split="train",
    )
    test = SparseLabelSet(
        rows=np.array(te_r), cols=np.array(te_c), classes=np.array(te_y),
        num_classes=num_classes, split="test",
    )
    return train, test


def describe_scene(directory) -> dict:
    scene = load_scene(directory)
    return {
        "path": str(directory),
        "format": "scene-directory",
        "height": scene.height,
        "width": scene.width,
        "num_classes": scene.num_classes,
        "class_names": list(scene.class_names),
        "hsi_bands": scene.hsi.channels,
        "sar_channels": scene.sar.channels,
        "train_points": len(scene.train_labels),
        "test_points": len(scene.test_labels),
        "train_class_counts": scene.train_labels.class_counts().tolist(),
        "test_class_counts": scene.test_labels.class_counts().tolist(),
        "meta": scene.meta,
    }
