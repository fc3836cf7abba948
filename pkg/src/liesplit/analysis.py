"""Rotation/translation classification of learned ODEs and flow-field renderings."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np
import torch

from .flowfield import OdeParams, TransformParams, base_grid, integrate

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Thresholds:
    skew: float = 0.8
    translation: float = 0.8
    field_ratio: float = 0.1


def _as_np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().double().numpy()
    return np.asarray(x, dtype=np.float64)


def skew_ratio(A) -> float:
    """Share of the antisymmetric part in ``||skew||_F + ||sym||_F``."""
    A = _as_np(A)
    skew = np.linalg.norm((A - A.T) / 2.0)
    sym = np.linalg.norm((A + A.T) / 2.0)
    denom = skew + sym
    return 0.0 if denom == 0.0 else float(skew / denom)


def translation_dominance(ode: OdeParams) -> float:
    nb = float(np.linalg.norm(_as_np(ode.b)))
    na = float(np.linalg.norm(_as_np(ode.A)))
    denom = nb + na
    return 0.0 if denom == 0.0 else nb / denom


def angular_rate(A) -> float:
    """Rotation rate (radians per unit integration time) of the skew part."""
    A = _as_np(A)
    return float((A[1, 0] - A[0, 1]) / 2.0)


def classify(ode: OdeParams, thresholds: Thresholds = Thresholds()) -> str:
    sr = skew_ratio(ode.A)
    td = translation_dominance(ode)
    na = float(np.linalg.norm(_as_np(ode.A)))
    nb = float(np.linalg.norm(_as_np(ode.b)))
    if sr >= thresholds.skew and td < thresholds.translation:
        return "rotation"
    if td >= thresholds.translation and sr * na < thresholds.field_ratio * nb:
        return "translation"
    return "mixed"


@dataclass
class TransformReport:
    A: list
    b: list
    skew_ratio: float
    translation_dominance: float
    classification: str
    angular_rate: float
    degenerate: bool


def transform_report(ode: OdeParams, thresholds: Thresholds = Thresholds()) -> TransformReport:
    A = _as_np(ode.A)
    b = _as_np(ode.b)
    return TransformReport(
        A=A.tolist(),
        b=b.tolist(),
        skew_ratio=skew_ratio(A),
        translation_dominance=translation_dominance(ode),
        classification=classify(ode, thresholds),
        angular_rate=angular_rate(A),
        degenerate=bool(not A.any() and not b.any()),
    )


def format_table(name: str, rep: TransformReport) -> str:
    """Plain-text A/b block in the layout of the learned-parameter tables."""
    A, b = rep.A, rep.b
    return "\n".join([
        f"Transformer {name}  [{rep.classification}]",
        f"  A = [[{A[0][0]: .2e}, {A[0][1]: .2e}],   b = [{b[0]: .2e},",
        f"       [{A[1][0]: .2e}, {A[1][1]: .2e}]]        {b[1]: .2e}]",
        f"  skew_ratio = {rep.skew_ratio:.3f}   translation_dominance = {rep.translation_dominance:.3f}",
    ])


def separation(g: TransformReport, v: TransformReport, thresholds: Thresholds = Thresholds()) -> bool:
    """One transform rotation-like by skew ratio, the other translation-dominated."""
    def pair(rot, trans):
        return rot.skew_ratio >= thresholds.skew and trans.translation_dominance >= thresholds.translation
    return bool(pair(g, v) or pair(v, g))


def report(ode_g: OdeParams, ode_v: OdeParams, losses: Optional[Dict[str, float]] = None,
           thresholds: Thresholds = Thresholds(), dataset: Optional[dict] = None) -> dict:
    """Structured report of both transforms, their separation and the loss summary."""
    g = transform_report(ode_g, thresholds)
    v = transform_report(ode_v, thresholds)
    classes = {g.classification, v.classification}
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "transforms": {"g": asdict(g), "v": asdict(v)},
        "separated": classes == {"rotation", "translation"},
        "separation_criterion": separation(g, v, thresholds),
        "thresholds": asdict(thresholds),
        "losses": dict(losses or {}),
        "dataset": dict(dataset or {}),
        "table": format_table("g", g) + "\n" + format_table("v", v),
    }


# -- flow-field rendering --------------------------------------------------

def _line(img: np.ndarray, x0: int, y0: int, x1: int, y1: int, color) -> None:
    """Bresenham segment, clipped to the canvas."""
    h, w = img.shape[:2]
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def displacement_field(ode: OdeParams, tp: TransformParams, K: float, resolution: int, stride: int):
    """Arrow tails and heads in pixel units, sampled every ``stride`` pixels."""
    dtype = torch.float64
    ode = OdeParams(ode.A.detach().to(dtype), ode.b.detach().to(dtype))
    tp = TransformParams(torch.as_tensor(tp.lam, dtype=dtype), torch.as_tensor(tp.c, dtype=dtype))
    base = base_grid(resolution, resolution, dtype=dtype)
    with torch.no_grad():
        moved = integrate(base, ode, tp, K)
    scale = (resolution - 1) / 2.0
    start = ((base[::stride, ::stride] + 1.0) * scale).reshape(-1, 2).numpy()
    end = ((moved[::stride, ::stride] + 1.0) * scale).reshape(-1, 2).numpy()
    return start, end


def render_flow_field(ode: OdeParams, tp: TransformParams, K: float = 10.0, resolution: int = 64,
                      stride: int = 8, arrow_color=(1.0, 0.2, 0.2), tail_color=(0.2, 0.4, 1.0)) -> np.ndarray:
    """``(3, R, R)`` image of displacement arrows from base points to their flowed images.

    Arrows shorter than half a pixel are not drawn, so a zero field renders as
    blank background.
    """
    img = np.zeros((resolution, resolution, 3), dtype=np.float32)
    start, end = displacement_field(ode, tp, K, resolution, stride)
    for (x0, y0), (x1, y1) in zip(start, end):
        vx, vy = x1 - x0, y1 - y0
        length = math.hypot(vx, vy)
        if length < 0.5:
            continue
        p0 = (int(round(x0)), int(round(y0)))
        p1 = (int(round(x1)), int(round(y1)))
        _line(img, *p0, *p1, arrow_color)
        head = min(3.0, 0.4 * length)
        ux, uy = vx / length, vy / length
        for sgn in (1.0, -1.0):
            # head barbs at +-30 degrees from the reversed shaft
            ca, sa = math.cos(math.radians(30)), sgn * math.sin(math.radians(30))
            hx = -(ca * ux - sa * uy) * head
            hy = -(sa * ux + ca * uy) * head
            _line(img, *p1, int(round(x1 + hx)), int(round(y1 + hy)), arrow_color)
        if 0 <= p0[0] < resolution and 0 <= p0[1] < resolution:
            img[p0[1], p0[0]] = tail_color
    return np.transpose(img, (2, 0, 1))


STRIP_FRAMES = 4


def reconstruction_strip(given, recon, n_frames: int = STRIP_FRAMES, gap: int = 2) -> np.ndarray:
    """``(H', W')`` panel: given frames on the top row, reconstructions below.

    Only the first ``n_frames`` of each ``(T, H, W)`` stack are shown;
    ``gap`` pixels of white separate the tiles.
    """
    given = _as_np(given)[:n_frames]
    recon = _as_np(recon)[:n_frames]
    if given.shape[0] < n_frames or recon.shape[0] < n_frames:
        raise ValueError(f"need at least {n_frames} frames per row")
    h, w = given.shape[-2:]
    out = np.ones((2 * h + gap, n_frames * w + (n_frames - 1) * gap), dtype=np.float32)
    for r, row in enumerate((given, recon)):
        for i in range(n_frames):
            y, x = r * (h + gap), i * (w + gap)
            out[y:y + h, x:x + w] = np.clip(row[i].reshape(h, w), 0.0, 1.0)
    return out
