"""Viewpoint planning: Fibonacci sphere sampling, geometric ranking and
centroid (zoomed) view synthesis from point prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, look_at, uv_to_ray
from .render import ViewGeometry

__all__ = ["ViewScore", "CentroidViewSpec", "SessionPlan",
           "fibonacci_sample", "fibonacci_directions", "rank_views",
           "back_project_prompt", "make_centroid_view"]

_GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0
_CANONICAL = np.vstack([np.eye(3), -np.eye(3)])


@dataclass(frozen=True)
class ViewScore:
    """Per-view informativeness: 0.4 * diversity + 0.3 * coverage + 0.3 * pitch."""

    index: int
    diversity: float
    coverage: float
    pitch: float

    @property
    def total(self) -> float:
        return 0.4 * self.diversity + 0.3 * self.coverage + 0.3 * self.pitch


@dataclass(frozen=True)
class CentroidViewSpec:
    """A zoomed view derived from a prompt on an anchor view."""

    anchor_index: int
    prompt: tuple          # (px, py) pixel coords on the anchor
    target: np.ndarray     # back-projected world point
    zoom: float

    def __post_init__(self):
        if not 0.0 < self.zoom <= 1.0:
            raise ValueError("zoom factor must lie in (0, 1]")
        object.__setattr__(self, "target",
                           np.asarray(self.target, dtype=np.float64).reshape(3))


@dataclass
class SessionPlan:
    """Anchors plus the flattened centroid set (union over anchor groups)."""

    anchors: list = field(default_factory=list)           # list[Camera]
    centroid_counts: list = field(default_factory=list)   # per-anchor K
    centroids: list = field(default_factory=list)         # list[CentroidViewSpec]

    def check(self):
        assert len(self.centroids) == sum(self.centroid_counts)


def fibonacci_directions(n: int) -> np.ndarray:
    """(N, 3) unit vectors on the Fibonacci lattice.

    z_i = 1 - 2(i + 0.5) / N, azimuth phi_i = 2 pi i / golden_ratio.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = 2.0 * math.pi * i / _GOLDEN
    return np.stack([r * np.cos(phi), z, r * np.sin(phi)], axis=-1)


def fibonacci_sample(n: int, radius: float, center, intrinsics: dict) -> list:
    """N cameras on a Fibonacci sphere around `center`, all aimed at it.

    The lattice z coordinate maps to world +Y so that pitch extremes are
    top-down / bottom-up views.  `intrinsics` carries fx, fy, cx, cy,
    width, height shared by every camera.
    """
    center = np.asarray(center, dtype=np.float64)
    dirs = fibonacci_directions(n)
    cams = []
    for d in dirs:
        pos = center + radius * d
        cams.append(Camera(world_from_camera=look_at(pos, center), **intrinsics))
    return cams


def _minmax(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant column normalizes to all ones."""
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def rank_views(cameras) -> list:
    """Score and sort views by geometric informativeness, best first.

    Diversity is the mean pairwise angular separation of viewing
    directions; coverage the proximity to the nearest canonical axis;
    pitch the absolute elevation angle.  Components are min-max
    normalized over the candidate set; ties break by ascending index.
    """
    cameras = list(cameras)
    if not cameras:
        raise ValueError("rank_views needs at least one camera")
    fwd = np.stack([c.forward for c in cameras])
    fwd = fwd / np.linalg.norm(fwd, axis=1, keepdims=True)
    n = len(cameras)
    if n == 1:
        div_raw = np.zeros(1)
    else:
        cosm = np.clip(fwd @ fwd.T, -1.0, 1.0)
        ang = np.arccos(cosm)
        div_raw = (ang.sum(axis=1)) / (n - 1)
    cov_raw = (fwd @ _CANONICAL.T).max(axis=1)
    pitch_raw = np.abs(np.arcsin(np.clip(fwd[:, 1], -1.0, 1.0)))
    div = _minmax(div_raw)
    cov = _minmax(cov_raw)
    pit = _minmax(pitch_raw)
    scores = [ViewScore(i, float(div[i]), float(cov[i]), float(pit[i]))
              for i in range(n)]
    return sorted(scores, key=lambda s: (-s.total, s.index))


def back_project_prompt(view: ViewGeometry, prompt) -> np.ndarray:
    """Lift a 2D prompt to the world surface point under it.

    Uses the depth of the maximum-weight sample along the pixel ray (the
    sharp surface estimate), not the expected depth.
    """
    px, py = int(prompt[0]), int(prompt[1])
    h, w = view.d_exp.shape
    if not (0 <= px < w and 0 <= py < h):
        raise ValueError(f"prompt ({px}, {py}) outside the {w}x{h} image")
    if view.n_samples[py, px] <= 0:
        raise ValueError("no surface under prompt")
    ray = uv_to_ray(view.camera, (px + 0.5) / w, (py + 0.5) / h)
    return ray.at(float(view.z_surface[py, px]))


def make_centroid_view(anchor: Camera, target, zoom: float) -> Camera:
    """Move the anchor toward `target` by (1 - zoom) of the distance and
    re-aim at it; intrinsics are unchanged."""
    if not 0.0 < zoom <= 1.0:
        raise ValueError("zoom factor must lie in (0, 1]")
    target = np.asarray(target, dtype=np.float64)
    rel = target - anchor.position
    if float(rel @ anchor.forward) <= 0.0:
        raise ValueError("target is behind the anchor camera")
    pos = anchor.position + (1.0 - zoom) * rel
    return Camera(fx=anchor.fx, fy=anchor.fy, cx=anchor.cx, cy=anchor.cy,
                  width=anchor.width, height=anchor.height,
                  world_from_camera=look_at(pos, target))
