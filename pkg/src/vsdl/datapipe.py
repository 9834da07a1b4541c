"""Slice-stack preparation: selection, resampling, normalisation, differencing, splits.

On-disk layout for one scan::

    <scan>/slice_000.pgm ... slice_012.pgm   (binary PGM, 8-bit, maxval 255)
    <scan>/meta.json                         {id, spacing_mm, plafond_index, label?}

A manifest is a JSON document ``{seed, ratios, entries: [{id, dir, label, split}]}``
where ``dir`` is relative to the manifest's own directory.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, InputError, RangeError

STACK_LEN = 13
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SliceStack:
    """Ordered 2D slices, distal to proximal, as a ``[N, H, W]`` float array."""
    slices: np.ndarray
    spacing_mm: float = 0.3
    label: int | None = None
    id: str = ""
    plafond_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.slices)
        if arr.ndim != 3:
            raise InputError(f"slice stack must be [N,H,W], got shape {arr.shape}")
        self.slices = arr

    def __len__(self) -> int:
        return self.slices.shape[0]

    @property
    def side_px(self) -> int:
        return self.slices.shape[-1]


def slice_offsets(spacing_mm: float, span_mm: float = 50.0, count: int = STACK_LEN) -> list[int]:
    """Index offsets of ``count`` evenly spaced slices over ``span_mm``, both ends included."""
    if count < 1:
        raise ConfigError("slice count must be >= 1")
    if spacing_mm <= 0 or span_mm < 0:
        raise ConfigError("spacing must be positive and span non-negative")
    if count == 1:
        return [0]
    step = span_mm / ((count - 1) * spacing_mm)
    return [round_half_up(k * step) for k in range(count)]


def select_slices(volume: Sequence[np.ndarray] | np.ndarray, plafond_index: int, spacing_mm: float,
                  span_mm: float = 50.0, count: int = STACK_LEN) -> SliceStack:
    """Pick ``count`` slices from the plafond slice up to ``span_mm`` proximal.

    Values are passed through untouched; normalisation is a separate step.
    """
    n = len(volume)
    if not 0 <= plafond_index < n:
        raise RangeError(f"plafond index {plafond_index} outside volume of {n} slices")
    offs = slice_offsets(spacing_mm, span_mm, count)
    last = plafond_index + offs[-1]
    if last >= n:
        avail = (n - 1 - plafond_index) * spacing_mm
        raise RangeError(
            f"volume extends only {avail:.2f} mm proximal of the plafond; {span_mm:g} mm requested "
            f"(needs slice {last}, have {n})")
    picked = np.stack([np.asarray(volume[plafond_index + o]) for o in offs])
    return SliceStack(picked, spacing_mm=spacing_mm, plafond_index=plafond_index)


def _interp_axis(img: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    in_n = img.shape[axis]
    if in_n == out_n:
        return img
    src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
    src = np.clip(src, 0, in_n - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_n - 1)
    t = src - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = out_n
    # a + t*(b - a) keeps constant regions exact
    return a + t.reshape(shape) * (b - a)


def resize_bilinear(image: np.ndarray, out_side: int = 224) -> np.ndarray:
    """Bilinear resample to ``out_side`` x ``out_side`` with half-pixel centres."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 2:
        raise InputError(f"resize needs a 2D image of at least 2x2, got shape {img.shape}")
    if out_side < 1:
        raise ConfigError("output side must be positive")
    return _interp_axis(_interp_axis(img, out_side, 0), out_side, 1)


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities to [0, 1] by dividing by 255."""
    img = np.asarray(image)
    if img.size and (img.min() < 0 or img.max() > 255):
        raise InputError(f"pixel values must lie in [0, 255], got [{img.min()}, {img.max()}]")
    if not np.issubdtype(img.dtype, np.integer) and not np.all(img == np.round(img)):
        raise InputError("normalize expects integer-valued pixels")
    return (img.astype(np.float64) / 255.0).astype(np.float32)


def denormalize(image: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)


def differential_array(slices: np.ndarray, axis: int = 0) -> np.ndarray:
    """Successive differences ``slice[k+1] - slice[k]`` along ``axis``."""
    arr = np.asarray(slices)
    if arr.shape[axis] < 2:
        raise InputError(f"differencing needs at least 2 slices, got {arr.shape[axis]}")
    return np.diff(arr, axis=axis)


def differential(stack: SliceStack | np.ndarray) -> list[np.ndarray]:
    """The N-1 difference frames of an N-slice stack."""
    arr = stack.slices if isinstance(stack, SliceStack) else np.asarray(stack)
    return list(differential_array(arr, axis=0))


def prepare_stack(volume, plafond_index: int, spacing_mm: float, side: int = 224,
                  span_mm: float = 50.0, count: int = STACK_LEN) -> SliceStack:
    """Select, rescale to ``side``, requantise to 8 bits and normalise a raw volume."""
    picked = select_slices(volume, plafond_index, spacing_mm, span_mm, count)
    out = []
    for sl in picked.slices:
        resized = np.clip(np.round(resize_bilinear(sl, side)), 0, 255).astype(np.uint8)
        out.append(normalize(resized))
    return SliceStack(np.stack(out), spacing_mm=spacing_mm, plafond_index=plafond_index)


# --- manifests and splitting ------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    dir: str
    label: int
    split: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    root: Path | None = field(default=None, compare=False)

    def counts(self) -> dict[tuple[int, str], int]:
        out: dict[tuple[int, str], int] = {}
        for e in self.entries:
            out[(e.label, e.split)] = out.get((e.label, e.split), 0) + 1
        return out

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "entries": [{"id": e.id, "dir": e.dir, "label": e.label, "split": e.split}
                        for e in self.entries],
        }

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.root = path.parent

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(str(e["id"]), str(e["dir"]), int(e["label"]), str(e["split"]))
                       for e in doc["entries"]]
            return cls(entries, int(doc["seed"]), tuple(doc["ratios"]), root=path.parent)
        except FileNotFoundError:
            raise InputError(f"manifest not found: {path}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed manifest {path}: {exc}") from exc

    def stack_dir(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.dir


def stratified_split(entries: Iterable[ManifestEntry], ratios=DEFAULT_RATIOS,
                     seed: int = 0) -> DatasetManifest:
    """Seeded per-label split: test and val get round(ratio * N), train the rest."""
    entries = [ManifestEntry(e.id, e.dir, int(e.label), "") for e in entries]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ConfigError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    labels = sorted({e.label for e in entries})
    if labels != [0, 1]:
        raise ConfigError(f"both labels 0 and 1 must be present, got {labels}")
    rng = np.random.default_rng(seed)
    for lab in labels:
        idx = [i for i, e in enumerate(entries) if e.label == lab]
        n = len(idx)
        if n < 3:
            raise ConfigError(f"label {lab} has only {n} entries; at least 3 are needed to split")
        n_test = round_half_up(ratios[2] * n)
        n_val = round_half_up(ratios[1] * n)
        if n_test + n_val > n:
            raise ConfigError(f"label {lab}: {n} entries cannot hold {n_val} val + {n_test} test")
        order = rng.permutation(n)
        for rank, j in enumerate(order):
            if rank < n_test:
                split = "test"
            elif rank < n_test + n_val:
                split = "val"
            else:
                split = "train"
            entries[idx[j]].split = split
    return DatasetManifest(entries, seed, tuple(float(r) for r in ratios))


# --- disk format --------------------------------------------------------------

def slice_name(k: int) -> str:
    return f"slice_{k:03d}.pgm"


def write_pgm(path, image_u8: np.ndarray) -> None:
    img = np.asarray(image_u8)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise InputError(f"PGM writer expects a 2D uint8 image, got {img.dtype} {img.shape}")
    Image.fromarray(img).save(path, format="PPM")


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing slice file: {path}")
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise InputError(f"{path}: expected an 8-bit grayscale PGM, got {im.format} {im.mode}")
            return np.array(im, dtype=np.uint8)
    except OSError as exc:
        raise InputError(f"{path}: unreadable PGM ({exc})") from exc


def write_stack(directory, stack: SliceStack, meta_extra: dict | None = None) -> Path:
    """Write a normalised stack as 8-bit PGM slices plus ``meta.json``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        for k, sl in enumerate(stack.slices):
            write_pgm(d / slice_name(k), denormalize(sl))
        meta = {"id": stack.id, "spacing_mm": stack.spacing_mm, "plafond_index": stack.plafond_index}
        if stack.label is not None:
            meta["label"] = int(stack.label)
        meta.update(meta_extra or {})
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write stack to {d}: {exc}") from exc
    return d


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.is_file():
        raise InputError(f"missing metadata file: {path}")
    try:
        return json.loads(path.read_text())
    except ValueError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc


def read_stack(directory, count: int = STACK_LEN) -> SliceStack:
    """Load ``count`` slices from a stack directory and normalise them."""
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"stack directory not found: {d}")
    meta = read_meta(d)
    slices = [normalize(read_pgm(d / slice_name(k))) for k in range(count)]
    if len({s.shape for s in slices}) != 1:
        raise InputError(f"{d}: slices differ in size")
    label = meta.get("label")
    return SliceStack(np.stack(slices), spacing_mm=float(meta.get("spacing_mm", 0.3)),
                      label=None if label is None else int(label), id=str(meta.get("id", d.name)),
                      plafond_index=int(meta.get("plafond_index", 0)))


def read_volume(directory) -> tuple[list[np.ndarray], dict]:
    """Read every ``slice_*.pgm`` of a raw scan directory in index order."""
    d = Path(directory)
    meta = read_meta(d)
    names = sorted(n for n in os.listdir(d) if n.startswith("slice_") and n.endswith(".pgm"))
    if not names:
        raise InputError(f"{d}: no slice_*.pgm files")
    return [read_pgm(d / n) for n in names], meta


def load_split(manifest: DatasetManifest, split: str) -> list[SliceStack]:
    stacks = []
    for e in manifest.split(split):
        st = read_stack(manifest.stack_dir(e))
        st.label = e.label
        st.id = e.id
        stacks.append(st)
    return stacks
