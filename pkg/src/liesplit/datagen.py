"""Deterministic synthetic sequences: a textured square or a rigid semicircle pair.

Each frame is rendered from a canonical (axis-aligned, origin-centered)
texture raster by one bilinear lookup at the cumulative pose, so frames never
accumulate resampling error. Frame ``i`` has pose

    angle_i  = angle0 + i * rotation_deg
    center_i = center0 + i * (dx, dy)

and a pixel ``p`` reads the texture at ``R(-angle_i) (p - center_i)``. Image
coordinates are ``x`` to the right and ``y`` down.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from scipy import ndimage

KINDS = ("square", "semicircle")
GENERATOR_VERSION = "liesplit-datagen/1 (semicircle pair: flat edges face the midpoint)"

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x``."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """Seed of sequence ``index``: splitmix64 of ``master + index * golden``."""
    return splitmix64((master_seed + index * _GOLDEN) & _MASK64)


@dataclass(frozen=True)
class Geometry:
    """Image size and object/motion constants of a dataset."""

    image_size: int = 64
    frames: int = 7
    square_side: float = 30.0
    blocks: int = 4
    radius: float = 8.0
    pair_offset: float = 20.0
    angles: Tuple[float, ...] = (8.0, 10.0, 12.0)
    shifts: Tuple[int, ...] = (-3, 0, 3)
    gray_range: Tuple[float, float] = (0.2, 1.0)

    @classmethod
    def scaled(cls, image_size: int) -> "Geometry":
        """Shrink object sizes and shifts in proportion to ``image_size / 64``."""
        f = image_size / 64.0
        s = max(1, int(3 * f))
        return cls(image_size=image_size, square_side=30.0 * f, radius=8.0 * f,
                   pair_offset=20.0 * f, shifts=(-s, 0, s))

    def levels(self) -> np.ndarray:
        n = self.blocks * self.blocks
        return np.linspace(self.gray_range[0], self.gray_range[1], n)


@dataclass(frozen=True)
class SequenceSpec:
    kind: str
    rotation_deg: float
    dx: int
    dy: int
    seed: int
    center: Tuple[float, float]
    angle0_deg: float
    texture: Tuple[Tuple[int, ...], ...]
    geometry: Geometry = field(default_factory=Geometry)

    def center_at(self, i: int) -> Tuple[float, float]:
        return (self.center[0] + i * self.dx, self.center[1] + i * self.dy)

    def angle_at(self, i: int) -> float:
        return self.angle0_deg + i * self.rotation_deg


@dataclass
class Sequence:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    truth: SequenceSpec  # evaluation only


# -- canonical textures ----------------------------------------------------

def _square_raster(geom: Geometry, perm: Tuple[int, ...]):
    side = geom.square_side
    n = int(math.ceil(side)) + 2
    origin = (n - 1) / 2.0
    u = np.arange(n) - origin
    ux, uy = np.meshgrid(u, u)
    inside = (np.abs(ux) < side / 2) & (np.abs(uy) < side / 2)
    block = side / geom.blocks
    bx = np.clip(np.floor((ux + side / 2) / block), 0, geom.blocks - 1).astype(int)
    by = np.clip(np.floor((uy + side / 2) / block), 0, geom.blocks - 1).astype(int)
    levels = geom.levels()[list(perm)]
    raster = np.where(inside, levels[by * geom.blocks + bx], 0.0)
    return raster, origin


def _semicircle_raster(geom: Geometry, perms: Tuple[Tuple[int, ...], ...], supersample: int = 4):
    r = geom.radius
    half = geom.pair_offset / 2.0
    extent = half + r + 2.0
    n = int(math.ceil(2 * extent)) + 1
    origin = (n - 1) / 2.0
    # supersampled coverage: average texture values over sub-pixel samples
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    u = np.arange(n) - origin
    ux = (u[None, :, None, None] + offs[None, None, None, :])
    uy = (u[:, None, None, None] + offs[None, None, :, None])
    ux, uy = np.broadcast_arrays(ux, uy)
    acc = np.zeros(ux.shape)
    levels = geom.levels()
    for side, perm in zip((-1.0, 1.0), perms):
        # flat edge at x = side*half, disk extends away from the midpoint
        out = side * (ux - side * half)
        along = uy
        inside = (out >= 0) & (out ** 2 + along ** 2 < r ** 2)
        bi = np.clip(np.floor((along + r) / (2 * r / geom.blocks)), 0, geom.blocks - 1).astype(int)
        bj = np.clip(np.floor(out / (r / geom.blocks)), 0, geom.blocks - 1).astype(int)
        vals = levels[list(perm)][bi * geom.blocks + bj]
        acc = np.where(inside, vals, acc)
    return acc.mean(axis=(2, 3)), origin


def canonical_raster(spec: SequenceSpec):
    if spec.kind == "square":
        return _square_raster(spec.geometry, spec.texture[0])
    if spec.kind == "semicircle":
        return _semicircle_raster(spec.geometry, spec.texture)
    raise ValueError(f"unknown kind {spec.kind!r}")


def object_radius(kind: str, geom: Geometry) -> float:
    """Radius of a disk around the object center that contains the object."""
    if kind == "square":
        return geom.square_side / math.sqrt(2.0)
    if kind == "semicircle":
        return math.hypot(geom.pair_offset / 2.0 + geom.radius, geom.radius)
    raise ValueError(f"unknown kind {kind!r}")


SUPERSAMPLE = 4


@lru_cache(maxsize=None)
def lit_radius(kind: str, geom: Geometry, supersample: int = SUPERSAMPLE) -> float:
    """Distance from the object center beyond which a rendered pixel stays dark.

    A pixel is lit only if one of its sub-samples (at most ``0.5 - 0.5/ss``
    per axis from the pixel center) falls within the bilinear support (under
    one raster cell per axis) of a nonzero texture sample.
    """
    perms = tuple(tuple(range(geom.blocks * geom.blocks)) for _ in range(2))
    spec = SequenceSpec(kind, 0.0, 0, 0, 0, (0.0, 0.0), 0.0, perms[:1] if kind == "square" else perms, geom)
    raster, origin = canonical_raster(spec)
    ys, xs = np.nonzero(raster > 0)
    extent = float(np.hypot(xs - origin, ys - origin).max())
    return extent + math.sqrt(2.0) * (1.0 + 0.5 - 0.5 / supersample)


def _clearance(kind: str, geom: Geometry) -> float:
    # every lit pixel then lies in rows/cols 1..S-2, strictly inside the frame
    return lit_radius(kind, geom) + 1e-9


def check_inside(spec: SequenceSpec) -> None:
    geom = spec.geometry
    m = _clearance(spec.kind, geom)
    hi = geom.image_size - 1 - m
    for i in range(geom.frames):
        cx, cy = spec.center_at(i)
        if not (m <= cx <= hi and m <= cy <= hi):
            raise ValueError(
                f"object leaves the frame at frame {i}: center ({cx:.2f}, {cy:.2f}) "
                f"outside [{m:.2f}, {hi:.2f}]"
            )


# -- rendering -------------------------------------------------------------

def render(spec: SequenceSpec, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """All frames of ``spec`` as a ``(T, S, S)`` float32 array.

    Each pixel averages ``supersample**2`` bilinear texture lookups spread over
    its footprint (anti-aliasing). ``p - i * (dx, dy)`` is formed before any
    fractional term, so pure translations reproduce exact pixel shifts.
    """
    check_inside(spec)
    geom = spec.geometry
    raster, origin = canonical_raster(spec)
    s = geom.image_size
    py, px = np.mgrid[0:s, 0:s].astype(np.float64)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    frames = np.empty((geom.frames, s, s), dtype=np.float32)
    for i in range(geom.frames):
        a = math.radians(spec.angle_at(i))
        ca, sa = math.cos(a), math.sin(a)
        sx = px - i * spec.dx
        sy = py - i * spec.dy
        acc = np.zeros((s, s))
        for oy in offs:
            for ox in offs:
                qx = sx + ox - spec.center[0]
                qy = sy + oy - spec.center[1]
                ux = ca * qx + sa * qy
                uy = -sa * qx + ca * qy
                acc += ndimage.map_coordinates(raster, [uy + origin, ux + origin], order=1,
                                               mode="grid-constant", cval=0.0)
        frames[i] = np.clip(acc / supersample ** 2, 0.0, 1.0)
    return frames


def _check_kind(spec: SequenceSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind!r}")


def gen_square(spec: SequenceSpec) -> Sequence:
    _check_kind(spec, "square")
    return Sequence(render(spec), spec)


def gen_semicircle(spec: SequenceSpec) -> Sequence:
    _check_kind(spec, "semicircle")
    return Sequence(render(spec), spec)


def generate(spec: SequenceSpec) -> Sequence:
    return gen_square(spec) if spec.kind == "square" else gen_semicircle(spec)


# -- sampling --------------------------------------------------------------

def draw_motion(seed: int, geom: Geometry = Geometry()) -> Tuple[float, int, int]:
    rng = np.random.default_rng(seed)
    rot = float(geom.angles[rng.integers(len(geom.angles))])
    dx = int(geom.shifts[rng.integers(len(geom.shifts))])
    dy = int(geom.shifts[rng.integers(len(geom.shifts))])
    return rot, dx, dy


def draw_spec(kind: str, seed: int, geom: Geometry = Geometry()) -> SequenceSpec:
    """Motion, initial pose and texture permutation for one sequence."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    rot, dx, dy = draw_motion(seed, geom)
    rng = np.random.default_rng([seed, 1])
    m = _clearance(kind, geom)
    hi = geom.image_size - 1 - m
    span = geom.frames - 1
    center = []
    for d in (dx, dy):
        lo_c = m - min(0, span * d)
        hi_c = hi - max(0, span * d)
        if lo_c > hi_c:
            raise ValueError(f"no feasible start position for shift {d} with kind {kind!r}")
        center.append(float(rng.uniform(lo_c, hi_c)))
    angle0 = float(rng.uniform(0.0, 90.0))
    n_tex = 1 if kind == "square" else 2
    n_levels = geom.blocks * geom.blocks
    texture = tuple(tuple(int(v) for v in rng.permutation(n_levels)) for _ in range(n_tex))
    return SequenceSpec(kind, rot, dx, dy, seed, (center[0], center[1]), angle0, texture, geom)


def gen_dataset(n: int, kind: str, master_seed: int, geom: Geometry = Geometry()) -> Tuple[List[Sequence], dict]:
    """``n`` sequences with per-sequence seeds derived from ``master_seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seqs = [generate(draw_spec(kind, derive_seed(master_seed, i), geom)) for i in range(n)]
    manifest = {
        "kind": kind,
        "master_seed": master_seed,
        "count": n,
        "generator": GENERATOR_VERSION,
        "geometry": asdict(geom),
    }
    return seqs, manifest


def stack_frames(seqs: List[Sequence]) -> np.ndarray:
    """``(N, T, 1, S, S)`` float32 array of all frames."""
    return np.stack([s.frames for s in seqs])[:, :, None]


def ground_truth(spec: SequenceSpec, omega_deg: float = 10.0):
    """Generative motion expressed as flow parameters in normalized units.

    Returns ``(A_g, b_g, A_v, b_v, enc)`` where ``enc`` is the 12-vector in
    encoder slot order. The rotation field is ``-omega * J (p - center)`` with
    ``J = [[0, -1], [1, 0]]``, integrated for ``rotation_deg / omega_deg``; the
    translation is carried entirely by ``c``.
    """
    s = spec.geometry.image_size
    unit = 2.0 / (s - 1)
    w = math.radians(omega_deg)
    A_g = np.array([[0.0, w], [-w, 0.0]])
    lam_g = spec.rotation_deg / omega_deg
    d = np.array([spec.dx, spec.dy], dtype=np.float64) * unit
    enc = []
    for i in (0, 1):
        c = (np.array(spec.center_at(i)) * unit) - 1.0
        c_g = -A_g @ c
        enc += [lam_g, c_g[0], c_g[1], 1.0, -d[0], -d[1]]
    return A_g, np.zeros(2), np.zeros((2, 2)), np.zeros(2), np.array(enc)
