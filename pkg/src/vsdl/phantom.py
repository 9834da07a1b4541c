"""Synthetic ankle-like slice stacks.

Every slice shows two filled ellipses, a large "tibia" and a small "fibula",
on a dark background. The gap between them stays put across a control
stack and widens slice by slice in an unstable one. Per-scan jitter of
position, rotation, size and starting gap is drawn from the same ranges for
both classes, so a single slice carries no class information; only the
slice-to-slice change does.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datapipe import (STACK_LEN, DatasetManifest, ManifestEntry, SliceStack, denormalize,
                       normalize, stratified_split, write_stack)
from .errors import ConfigError, InputError

BACKGROUND = 0.08
BONE = 0.62
CORTEX = 0.85


@dataclass(frozen=True)
class Jitter:
    """Per-scan (and per-slice, for ``slice_gap_px``) random variation ranges.

    Every field is a half-width of a uniform draw.
    """
    offset_px: float = 2.0
    rotation_deg: float = 8.0
    radius_frac: float = 0.08
    gap_px: float = 1.5
    growth_px: float = 0.2
    slice_gap_px: float = 0.15

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PhantomParams:
    side_px: int = 64
    base_gap_px: float = 3.0
    gap_growth_px_per_slice: float = 0.8
    noise_std: float = 0.03
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 0
    slices: int = STACK_LEN

    def scale(self) -> float:
        return self.side_px / 64.0

    def validate(self) -> None:
        j = self.jitter
        if self.side_px < 16:
            raise ConfigError(f"side_px must be >= 16, got {self.side_px}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.gap_growth_px_per_slice - j.growth_px <= 0:
            raise ConfigError("unstable gap growth must stay strictly positive over the jitter range")
        if min(j.offset_px, j.rotation_deg, j.radius_frac, j.gap_px, j.growth_px, j.slice_gap_px) < 0:
            raise ConfigError("jitter ranges must be non-negative")
        if self.base_gap_px - j.gap_px - j.slice_gap_px <= 0:
            raise ConfigError("base gap must stay positive over the jitter range (ellipses would touch)")
        if j.radius_frac >= 0.5:
            raise ConfigError("radius jitter must be below 50%")
        # worst case distance of any ellipse point from the image centre;
        # rotation-invariant, so it bounds every jittered draw
        g = _geometry(self)
        max_gap = (self.base_gap_px + j.gap_px + j.slice_gap_px
                   + (self.gap_growth_px_per_slice + j.growth_px) * (self.slices - 1))
        rscale = 1 + j.radius_frac
        fib_cx = g["tib_cx"] + g["tib_rx"] * rscale + max_gap + g["fib_rx"] * rscale
        reach_fib = math.hypot(fib_cx - g["c"], g["fib_dy"]) + max(g["fib_rx"], g["fib_ry"]) * rscale
        reach_tib = abs(g["tib_cx"] - g["c"]) + max(g["tib_rx"], g["tib_ry"]) * rscale
        limit = self.side_px / 2 - 1.0 - j.offset_px * math.sqrt(2)
        if max(reach_fib, reach_tib) > limit:
            raise ConfigError(
                f"phantom geometry exceeds the {self.side_px}px image: reach "
                f"{max(reach_fib, reach_tib):.1f}px > {limit:.1f}px")


def _geometry(params: PhantomParams) -> dict[str, float]:
    s = params.scale()
    return {
        "c": params.side_px / 2 - 0.5,
        "tib_cx": 19.0 * s - 0.5, "tib_rx": 11.0 * s, "tib_ry": 12.5 * s,
        "fib_rx": 5.0 * s, "fib_ry": 6.0 * s, "fib_dy": 1.5 * s,
    }


def _ellipse_coverage(xx, yy, cx, cy, rx, ry, angle) -> np.ndarray:
    """Approximate pixel coverage of a filled ellipse, with a one-pixel soft edge."""
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    d = np.sqrt(u * u + v * v)
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)


def _bone(xx, yy, cx, cy, rx, ry, angle) -> np.ndarray:
    outer = _ellipse_coverage(xx, yy, cx, cy, rx, ry, angle)
    inner = _ellipse_coverage(xx, yy, cx, cy, rx * 0.72, ry * 0.72, angle)
    return outer * (CORTEX + (BONE - CORTEX) * inner)


@dataclass
class ScanLayout:
    """Drawn per-scan geometry; ``gaps`` holds one tibia-fibula gap per slice."""
    offset: tuple[float, float]
    angle: float
    radius_scale: float
    gaps: np.ndarray


def draw_layout(label: int, params: PhantomParams, rng: np.random.Generator) -> ScanLayout:
    j = params.jitter
    s = params.scale()
    offset = (rng.uniform(-j.offset_px, j.offset_px) * s, rng.uniform(-j.offset_px, j.offset_px) * s)
    angle = math.radians(rng.uniform(-j.rotation_deg, j.rotation_deg))
    rscale = 1 + rng.uniform(-j.radius_frac, j.radius_frac)
    base = params.base_gap_px + rng.uniform(-j.gap_px, j.gap_px)
    growth = 0.0
    if label == 1:
        growth = params.gap_growth_px_per_slice + rng.uniform(-j.growth_px, j.growth_px)
    wobble = rng.uniform(-j.slice_gap_px, j.slice_gap_px, size=params.slices)
    gaps = base + growth * np.arange(params.slices) + wobble
    return ScanLayout(offset, angle, rscale, gaps * s)


def render_slice(params: PhantomParams, layout: ScanLayout, gap: float,
                 parts: bool = False):
    """Noise-free slice for one gap value; with ``parts`` also the two bone images."""
    g = _geometry(params)
    n = params.side_px
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    c = g["c"]
    ca, sa = math.cos(layout.angle), math.sin(layout.angle)
    rs = layout.radius_scale

    def place(px, py):
        # rotate about the image centre, then shift
        dx, dy = px - c, py - c
        return (c + dx * ca - dy * sa + layout.offset[0], c + dx * sa + dy * ca + layout.offset[1])

    tib_rx, tib_ry = g["tib_rx"] * rs, g["tib_ry"] * rs
    fib_rx, fib_ry = g["fib_rx"] * rs, g["fib_ry"] * rs
    tx, ty = place(g["tib_cx"], c)
    fx, fy = place(g["tib_cx"] + tib_rx + gap + fib_rx, c + g["fib_dy"])
    tib = _bone(xx, yy, tx, ty, tib_rx, tib_ry, layout.angle)
    fib = _bone(xx, yy, fx, fy, fib_rx, fib_ry, layout.angle)
    img = BACKGROUND + (1 - BACKGROUND) * np.maximum(tib, fib)
    img = np.clip(img, 0.0, 1.0)
    return (img, tib, fib) if parts else img


def generate_stack(label: int, params: PhantomParams | None = None, seed=0) -> SliceStack:
    """One labelled phantom stack, quantised to the 8-bit grid used on disk."""
    params = params or PhantomParams()
    if label not in (0, 1):
        raise InputError(f"label must be 0 or 1, got {label}")
    params.validate()
    rng = np.random.default_rng(seed)
    layout = draw_layout(label, params, rng)
    slices = []
    for gap in layout.gaps:
        img = render_slice(params, layout, float(gap))
        if params.noise_std > 0:
            img = img + rng.normal(0.0, params.noise_std, size=img.shape)
        slices.append(normalize(denormalize(np.clip(img, 0.0, 1.0))))
    return SliceStack(np.stack(slices), spacing_mm=0.3, label=label)


def differential_mass(stack: SliceStack) -> float:
    """Total absolute slice-to-slice change, sum of |dI| over all frames."""
    return float(np.abs(np.diff(stack.slices.astype(np.float64), axis=0)).sum())


def generate_cohort(out_dir, n_unstable: int = 48, n_control: int = 96,
                    params: PhantomParams | None = None, seed: int | None = None,
                    ratios=(0.8, 0.1, 0.1)) -> DatasetManifest:
    """Write a labelled phantom cohort plus ``manifest.json`` under ``out_dir``."""
    params = params or PhantomParams()
    seed = params.seed if seed is None else seed
    if n_unstable < 1 or n_control < 1:
        raise ConfigError("cohort needs at least one scan per class")
    params.validate()
    labels = [1] * n_unstable + [0] * n_control
    entries = [ManifestEntry(f"scan_{k:03d}", f"stacks/scan_{k:03d}", lab)
               for k, lab in enumerate(labels)]
    manifest = stratified_split(entries, ratios, seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create cohort directory {out}: {exc}") from exc
    for k, e in enumerate(manifest.entries):
        stack = generate_stack(e.label, params, seed=[seed, k])
        stack.id = e.id
        write_stack(out / e.dir, stack)
    manifest.write(out / "manifest.json")
    return manifest


def params_from_dict(d: dict | None) -> PhantomParams:
    d = dict(d or {})
    jit = d.pop("jitter", None)
    try:
        p = PhantomParams(**d)
        if jit is not None:
            p = replace(p, jitter=Jitter.none() if jit == 0 else Jitter(**jit))
    except TypeError as exc:
        raise ConfigError(f"bad phantom parameters: {exc}") from exc
    p.validate()
    return p
