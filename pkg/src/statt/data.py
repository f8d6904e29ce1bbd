"""Synthetic crop-phenology scenes and the dataset pipeline.

A scene is a field mosaic (recursive axis-aligned splitting) where each
field carries one crop class.  Every class has a double-logistic seasonal
signature; a seeded class-to-channel mixing matrix plus per-pixel
Gaussian noise turns signatures into a [T,C,H,W] series.  On top of that
this module provides frame-replacement noise injection (cloudy steps),
label cleaning (erosion + small-component removal), the 10x10 grid
train/val/test split, patch extraction with mirror-padded inputs,
per-channel normalization, and a binary on-disk format with bit-exact
round trips.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DataFormatError, ShapeError
from .model import IGNORE_LABEL

FORMAT_VERSION = 1

# Independent RNG streams derived from the scene seed, so adding draws to
# one stage never shifts another stage's values.
_STREAM_GEOMETRY = 0
_STREAM_ASSIGN = 1
_STREAM_MIXING = 2
_STREAM_PIXEL_NOISE = 3
_STREAM_SPLIT = 4
_STREAM_FRAME_NOISE = 5


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass(frozen=True)
class ClassSignature:
    """Double-logistic seasonal profile of one crop class.

    s(t) = amplitude * (sigmoid((t - onset)/slope) - sigmoid((t - offset)/slope)):
    greenness rises around ``onset``, peaks midway, and falls around
    ``offset``.  Slope controls how sharp the transitions are.
    """

    name: str
    onset: float
    offset: float
    amplitude: float = 1.0
    slope: float = 0.7

    def __post_init__(self):
        if not self.name:
            raise ConfigError("class signature needs a non-empty name")
        if self.offset <= self.onset:
            raise ConfigError(
                f"class {self.name!r}: offset {self.offset} must exceed "
                f"onset {self.onset}"
            )
        if self.amplitude <= 0 or self.slope <= 0:
            raise ConfigError(f"class {self.name!r}: amplitude and slope must be > 0")

    @property
    def peak_time(self) -> float:
        return 0.5 * (self.onset + self.offset)

    def values(self, time_steps: int) -> np.ndarray:
        t = np.arange(time_steps, dtype=np.float64)
        rise = 1.0 / (1.0 + np.exp(-(t - self.onset) / self.slope))
        fall = 1.0 / (1.0 + np.exp(-(t - self.offset) / self.slope))
        return self.amplitude * (rise - fall)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 512
    width: int = 512
    time_steps: int = 12
    channels: int = 4
    classes: tuple[ClassSignature, ...] = ()
    mean_field_size: int = 48
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError(f"need >= 2 classes, got {len(self.classes)}")
        if self.time_steps < 4:
            raise ConfigError(f"time_steps must be >= 4, got {self.time_steps}")
        if self.height < 2 or self.width < 2 or self.channels < 1:
            raise ConfigError("scene dims must be positive (and >= 2 px)")
        if self.mean_field_size < 2:
            raise ConfigError(
                f"mean_field_size {self.mean_field_size} would split fields "
                "below one pixel"
            )
        if self.mean_field_size > max(self.height, self.width):
            raise ConfigError("mean_field_size exceeds the scene")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names: {names}")
        triples = [(c.onset, c.peak_time, c.offset) for c in self.classes]
        if len(set(triples)) != len(triples):
            raise ConfigError(
                "classes must have distinct (onset, peak, offset) triples"
            )

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def default_scene_config(seed: int = 0) -> SceneConfig:
    """512x512, T=12, C=4, four crop classes with staggered seasons."""
    return SceneConfig(
        height=512,
        width=512,
        time_steps=12,
        channels=4,
        classes=(
            ClassSignature("winter_grain", onset=0.5, offset=5.0, amplitude=1.0),
            ClassSignature("spring_crop", onset=2.5, offset=7.5, amplitude=0.9),
            ClassSignature("summer_crop", onset=4.5, offset=10.0, amplitude=1.1),
            ClassSignature("late_harvest", onset=3.0, offset=10.5, amplitude=0.7,
                           slope=1.1),
        ),
        mean_field_size=48,
        noise_sigma=0.05,
        seed=seed,
    )


def scene_config_to_dict(config: SceneConfig) -> dict:
    d = asdict(config)
    d["classes"] = list(d["classes"])  # tuples do not survive a JSON round trip
    return d


def scene_config_from_dict(d) -> SceneConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"scene config must be an object, got {type(d).__name__}")
    fields = {f.name for f in SceneConfig.__dataclass_fields__.values()}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
    kwargs = dict(d)
    if "classes" in kwargs:
        sigs = []
        for i, c in enumerate(kwargs["classes"]):
            if not isinstance(c, dict):
                raise ConfigError(f"classes[{i}] must be an object")
            allowed = {f.name for f in ClassSignature.__dataclass_fields__.values()}
            bad = set(c) - allowed
            if bad:
                raise ConfigError(f"classes[{i}]: unknown keys {sorted(bad)}")
            try:
                sigs.append(ClassSignature(**c))
            except TypeError as e:
                raise ConfigError(f"classes[{i}]: {e}") from None
        kwargs["classes"] = tuple(sigs)
    try:
        return SceneConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid scene config: {e}") from None


@dataclass
class SceneDataset:
    """A scene plus labels, split assignment, and bookkeeping manifest.

    ``splits`` is a grid of split names indexed [cell_row][cell_col];
    remainder rows/columns of the scene attach to the last cell.
    """

    x: np.ndarray                 # [T,C,H,W] float32
    y: np.ndarray                 # [H,W] uint8, 255 = ignore
    splits: list[list[str]]
    manifest: dict

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.x.shape

    @property
    def num_classes(self) -> int:
        return int(self.manifest["dims"]["L"])

    @property
    def class_names(self) -> list[str]:
        return list(self.manifest["class_names"])

    def split_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for row in self.splits:
            for name in row:
                out[name] = out.get(name, 0) + 1
        return out


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _split_fields(height: int, width: int, mean_size: int,
                  rng: np.random.Generator) -> list[tuple[int, int, int, int]]:
    """Recursive axis-aligned splitting into fields of roughly mean_size.

    A rectangle splits (at a seeded 35-65% cut of its longer side) while
    its longer side exceeds 1.5x the target, giving sides in roughly
    [0.5, 1.5] x mean_size.
    """
    fields = []
    stack = [(0, 0, height, width)]
    while stack:
        top, left, h, w = stack.pop()
        if max(h, w) <= 1.5 * mean_size:
            fields.append((top, left, h, w))
            continue
        extent = max(h, w)
        cut = int(round(extent * rng.uniform(0.35, 0.65)))
        cut = min(max(cut, 1), extent - 1)
        if h >= w:
            stack.append((top, left, cut, w))
            stack.append((top + cut, left, h - cut, w))
        else:
            stack.append((top, left, h, cut))
            stack.append((top, left + cut, h, w - cut))
    return fields


def generate_scene(config: SceneConfig) -> SceneDataset:
    """Deterministic synthetic scene for one seed.

    Fields get classes round-robin over a seeded field permutation, so
    every class is present whenever there are at least L fields.  Channel
    c of class l follows mix[c,l] * signature_l(t) + baseline_c plus
    per-pixel Gaussian noise.
    """
    h, w, steps = config.height, config.width, config.time_steps
    chans, classes = config.channels, config.num_classes

    fields = _split_fields(h, w, config.mean_field_size,
                           _rng(config.seed, _STREAM_GEOMETRY))
    if len(fields) < classes:
        raise ConfigError(
            f"only {len(fields)} fields for {classes} classes; "
            "reduce mean_field_size or the class count"
        )
    order = _rng(config.seed, _STREAM_ASSIGN).permutation(len(fields))
    y = np.empty((h, w), dtype=np.uint8)
    for rank, field_idx in enumerate(order):
        top, left, fh, fw = fields[field_idx]
        y[top:top + fh, left:left + fw] = rank % classes

    signatures = np.stack([c.values(steps) for c in config.classes])  # [L,T]
    mix_rng = _rng(config.seed, _STREAM_MIXING)
    mix = mix_rng.uniform(0.35, 1.15, size=(chans, classes))
    baseline = mix_rng.uniform(0.04, 0.16, size=chans)
    # lut[t,c,l]: clean channel value of class l at step t
    lut = (mix[None, :, :] * signatures.T[:, None, :]
           + baseline[None, :, None]).astype(np.float32)
    x = lut[:, :, y]                                                  # [T,C,H,W]
    if config.noise_sigma > 0:
        noise = _rng(config.seed, _STREAM_PIXEL_NOISE).standard_normal(
            size=x.shape, dtype=np.float32)
        x = x + config.noise_sigma * noise

    splits = grid_split(h, w, seed=_split_seed(config.seed))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": {"T": steps, "C": chans, "H": h, "W": w, "L": classes},
        "class_names": config.class_names,
        "seed": config.seed,
        "noisy_steps": [],
        "normalization": None,
        "scene_config": scene_config_to_dict(config),
        "files": {"x": "X.bin", "y": "Y.bin", "splits": "splits.json"},
    }
    return SceneDataset(np.ascontiguousarray(x), y, splits, manifest)


def _split_seed(scene_seed: int) -> int:
    # grid_split takes a plain integer seed; derive one stream-stably
    ss = np.random.SeedSequence([scene_seed, _STREAM_SPLIT])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# noise injection
# ---------------------------------------------------------------------------

def inject_noise(x: np.ndarray, fraction: float, seed: int,
                 noise_sigma: float = 0.05) -> tuple[np.ndarray, list[int]]:
    """Replace round(fraction*T) whole frames with cloud-like values.

    Each selected step becomes, per channel, the 90th percentile of that
    channel's clean values plus Gaussian(0, 2*noise_sigma) -- bright,
    class-independent cover.  Unselected steps are bit-identical to the
    input.  Returns the new array and the sorted selected steps.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ConfigError(f"noise fraction must be in [0, 0.5], got {fraction}")
    if x.ndim != 4:
        raise ShapeError(f"inject_noise: expected [T,C,H,W], got {x.shape}")
    steps = x.shape[0]
    count = int(np.floor(fraction * steps + 0.5))
    out = x.copy()
    if count == 0:
        return out, []
    rng = _rng(seed, _STREAM_FRAME_NOISE)
    chosen = sorted(int(t) for t in rng.permutation(steps)[:count])
    bright = np.percentile(x, 90.0, axis=(0, 2, 3)).astype(x.dtype)  # per channel
    for t in chosen:
        frame = rng.standard_normal(size=x.shape[1:], dtype=np.float32)
        out[t] = bright[:, None, None] + (2.0 * noise_sigma) * frame
    return out, chosen


# ---------------------------------------------------------------------------
# label cleaning
# ---------------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def clean_labels(y: np.ndarray, min_size: int = 10) -> np.ndarray:
    """Per-class 1-px erosion, then removal of small connected components.

    A pixel survives erosion iff it and all 8 neighbors share its class
    (scene borders count as outside).  Surviving 8-connected components
    smaller than ``min_size`` are removed.  Everything eroded or removed
    becomes the 255 ignore sentinel.
    """
    if y.ndim != 2:
        raise ShapeError(f"clean_labels: expected [H,W] labels, got {y.shape}")
    if min_size < 1:
        raise ConfigError(f"min_size must be >= 1, got {min_size}")
    out = np.full(y.shape, IGNORE_LABEL, dtype=np.uint8)
    for cls in np.unique(y):
        if cls == IGNORE_LABEL:
            continue
        mask = y == cls
        eroded = ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)
        if not eroded.any():
            continue
        labeled, n = ndimage.label(eroded, structure=_EIGHT)
        sizes = np.bincount(labeled.ravel(), minlength=n + 1)
        keep = sizes >= min_size
        keep[0] = False
        out[keep[labeled]] = cls
    return out


# ---------------------------------------------------------------------------
# splits and patches
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def grid_split(height: int, width: int, grid: tuple[int, int] = (10, 10),
               ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
               seed: int = 0) -> list[list[str]]:
    """Assign grid cells to train/val/test by a seeded permutation.

    Cell counts are floor(ratio * cells) for train and val; test takes
    the remainder, so a 10x10 grid at 60/20/20 gives exactly 60/20/20.
    """
    gh, gw = grid
    if gh < 1 or gw < 1 or gh > height or gw > width:
        raise ConfigError(f"grid {grid} incompatible with {height}x{width} scene")
    if len(ratios) != 3 or any(r < 0 for r in ratios) \
            or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be 3 non-negatives summing to 1, got {ratios}")
    cells = gh * gw
    n_train = int(ratios[0] * cells)
    n_val = int(ratios[1] * cells)
    order = np.random.default_rng(seed).permutation(cells)
    names = np.empty(cells, dtype=object)
    names[order[:n_train]] = "train"
    names[order[n_train:n_train + n_val]] = "val"
    names[order[n_train + n_val:]] = "test"
    return [[str(names[r * gw + c]) for c in range(gw)] for r in range(gh)]


def _cell_index(coord: int, extent: int, cells: int) -> int:
    # remainder pixels attach to the last row/column of cells
    size = extent // cells
    if size == 0:
        raise ConfigError(f"{cells} grid cells across only {extent} pixels")
    return min(coord // size, cells - 1)


@dataclass
class Patch:
    """One training example: input window, label window, scene position."""

    x: np.ndarray        # [T,C,in,in] float32
    y: np.ndarray        # [out,out] uint8
    row: int             # scene row of the label window's top-left corner
    col: int

    def majority_class(self) -> int | None:
        """Most frequent non-ignored label, or None if fully ignored."""
        counts = np.bincount(self.y.ravel(), minlength=256)[:IGNORE_LABEL]
        if counts.sum() == 0:
            return None
        return int(counts.argmax())


def extract_patches(dataset: SceneDataset, split: str, in_size: int,
                    out_size: int, stride: int | None = None) -> list[Patch]:
    """Cut a split's patches from the scene.

    Label windows tile the whole scene from the origin at ``stride``
    (default: out_size, i.e. non-overlapping).  A window belongs to a
    split iff every grid cell it touches carries that split, so windows
    straddling split borders are dropped rather than leaking pixels
    across splits.  Input windows are the centered in_size squares read
    from a mirror-padded copy of the scene; windows whose labels are all
    ignore-sentinel are dropped.
    """
    if split not in SPLIT_NAMES:
        raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {split!r}")
    steps, chans, h, w = dataset.x.shape
    if out_size < 1 or in_size < out_size:
        raise ConfigError(
            f"need in_size >= out_size >= 1, got in {in_size}, out {out_size}"
        )
    if (in_size - out_size) % 2 != 0:
        raise ConfigError(
            f"in_size - out_size must be even for centered windows, "
            f"got {in_size} - {out_size}"
        )
    if in_size > h or in_size > w:
        raise ConfigError(f"in_size {in_size} exceeds scene {h}x{w}")
    stride = out_size if stride is None else stride
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")

    pad = (in_size - out_size) // 2
    xp = np.pad(dataset.x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") \
        if pad else dataset.x
    gh, gw = len(dataset.splits), len(dataset.splits[0])

    patches = []
    for top in range(0, h - out_size + 1, stride):
        cr0 = _cell_index(top, h, gh)
        cr1 = _cell_index(top + out_size - 1, h, gh)
        for left in range(0, w - out_size + 1, stride):
            cc0 = _cell_index(left, w, gw)
            cc1 = _cell_index(left + out_size - 1, w, gw)
            owners = {dataset.splits[r][c]
                      for r in range(cr0, cr1 + 1) for c in range(cc0, cc1 + 1)}
            if owners != {split}:
                continue
            labels = dataset.y[top:top + out_size, left:left + out_size]
            if np.all(labels == IGNORE_LABEL):
                continue
            window = xp[:, :, top:top + in_size, left:left + in_size]
            patches.append(Patch(np.ascontiguousarray(window), labels.copy(),
                                 top, left))
    return patches


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def train_split_stats(dataset: SceneDataset) -> dict:
    """Per-channel mean/std over pixels whose grid cell is 'train'."""
    _, _, h, w = dataset.x.shape
    gh, gw = len(dataset.splits), len(dataset.splits[0])
    rows = np.array([_cell_index(r, h, gh) for r in range(h)])
    cols = np.array([_cell_index(c, w, gw) for c in range(w)])
    grid = np.array([[s == "train" for s in row] for row in dataset.splits])
    mask = grid[rows][:, cols]
    if not mask.any():
        raise ContractError("train split is empty; cannot compute statistics")
    values = dataset.x[:, :, mask]                 # [T,C,N]
    mean = values.mean(axis=(0, 2), dtype=np.float64)
    std = values.std(axis=(0, 2), dtype=np.float64)
    return {"mean": [float(m) for m in mean], "std": [float(s) for s in std]}


def normalize(x: np.ndarray, stats: dict) -> np.ndarray:
    """(x - mean_c) / std_c per channel; rejects zero spread."""
    mean = np.asarray(stats["mean"], dtype=x.dtype)
    std = np.asarray(stats["std"], dtype=x.dtype)
    if x.ndim != 4 or mean.shape != (x.shape[1],) or std.shape != (x.shape[1],):
        raise ShapeError(
            f"normalize: stats for {mean.shape} channels, data has {x.shape}"
        )
    if np.any(std <= 0):
        bad = int(np.argmin(std))
        raise ConfigError(f"normalize: channel {bad} has zero spread")
    return (x - mean[None, :, None, None]) / std[None, :, None, None]


def normalize_dataset(dataset: SceneDataset) -> None:
    """Normalize in place with train-split stats; guarded against reapplication."""
    norm = dataset.manifest.get("normalization")
    if norm and norm.get("applied"):
        raise ContractError(
            "dataset is already normalized (manifest normalization.applied)"
        )
    stats = train_split_stats(dataset)
    dataset.x = normalize(dataset.x, stats).astype(np.float32)
    dataset.manifest["normalization"] = {**stats, "applied": True}


# ---------------------------------------------------------------------------
# pipeline and on-disk format
# ---------------------------------------------------------------------------

def build_dataset(config: SceneConfig, noise_fraction: float = 0.0,
                  clean: bool = True, apply_normalization: bool = True) -> SceneDataset:
    """generate_scene -> inject_noise -> clean_labels -> normalize."""
    dataset = generate_scene(config)
    if noise_fraction > 0:
        dataset.x, noisy = inject_noise(dataset.x, noise_fraction, config.seed,
                                        config.noise_sigma)
        dataset.manifest["noisy_steps"] = noisy
    if clean:
        dataset.y = clean_labels(dataset.y)
    if apply_normalization:
        normalize_dataset(dataset)
    return dataset


def _write_atomic(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def save_dataset(path: str, dataset: SceneDataset) -> None:
    os.makedirs(path, exist_ok=True)
    d = dataset.manifest["dims"]
    if dataset.x.shape != (d["T"], d["C"], d["H"], d["W"]):
        raise ShapeError(f"manifest dims {d} do not match X shape {dataset.x.shape}")
    if dataset.y.shape != (d["H"], d["W"]):
        raise ShapeError(f"manifest dims {d} do not match Y shape {dataset.y.shape}")
    _write_atomic(os.path.join(path, "X.bin"),
                  np.ascontiguousarray(dataset.x, dtype="<f4").tobytes())
    _write_atomic(os.path.join(path, "Y.bin"),
                  np.ascontiguousarray(dataset.y, dtype=np.uint8).tobytes())
    _write_atomic(os.path.join(path, "splits.json"),
                  _dump_json({"grid": [len(dataset.splits), len(dataset.splits[0])],
                              "cells": dataset.splits}))
    _write_atomic(os.path.join(path, "manifest.json"), _dump_json(dataset.manifest))


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DataFormatError(message)


def load_dataset(path: str) -> SceneDataset:
    man_path = os.path.join(path, "manifest.json")
    _require(os.path.isfile(man_path), f"missing manifest {man_path}")
    try:
        manifest = json.load(open(man_path, "rb"))
    except ValueError as e:
        raise DataFormatError(f"unparseable {man_path}: {e}") from None
    _require(manifest.get("format_version") == FORMAT_VERSION,
             f"manifest.json: unsupported format_version "
             f"{manifest.get('format_version')!r}")
    dims = manifest.get("dims")
    _require(isinstance(dims, dict) and set(dims) >= {"T", "C", "H", "W", "L"},
             "manifest.json: dims must carry T, C, H, W, L")
    t, c, h, w = (int(dims[k]) for k in ("T", "C", "H", "W"))
    files = manifest.get("files") or {}
    for key in ("x", "y", "splits"):
        _require(key in files, f"manifest.json: files.{key} missing")

    x_path = os.path.join(path, files["x"])
    y_path = os.path.join(path, files["y"])
    s_path = os.path.join(path, files["splits"])
    for p in (x_path, y_path, s_path):
        _require(os.path.isfile(p), f"missing dataset file {p}")

    raw_x = open(x_path, "rb").read()
    want = t * c * h * w * 4
    _require(len(raw_x) == want,
             f"{files['x']}: {len(raw_x)} bytes, manifest dims need {want}")
    x = np.frombuffer(raw_x, dtype="<f4").reshape(t, c, h, w).copy()

    raw_y = open(y_path, "rb").read()
    _require(len(raw_y) == h * w,
             f"{files['y']}: {len(raw_y)} bytes, manifest dims need {h * w}")
    y = np.frombuffer(raw_y, dtype=np.uint8).reshape(h, w).copy()
    labeled = y[y != IGNORE_LABEL]
    _require(labeled.size == 0 or int(labeled.max()) < int(dims["L"]),
             f"{files['y']}: label {int(labeled.max())} outside L={dims['L']}")

    try:
        sp = json.load(open(s_path, "rb"))
    except ValueError as e:
        raise DataFormatError(f"unparseable {s_path}: {e}") from None
    _require(isinstance(sp, dict) and "cells" in sp and "grid" in sp,
             f"{files['splits']}: needs grid and cells")
    cells = sp["cells"]
    gh, gw = (int(g) for g in sp["grid"])
    _require(len(cells) == gh and all(len(row) == gw for row in cells),
             f"{files['splits']}: cells do not match grid {gh}x{gw}")
    for row in cells:
        for name in row:
            _require(name in SPLIT_NAMES,
                     f"{files['splits']}: unknown split {name!r}")
    return SceneDataset(x, y, [list(map(str, row)) for row in cells], manifest)
