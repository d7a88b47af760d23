"""Point-prompted 2D confidence masks and depth-weighted refinement.

The segmenter is a deterministic region grower standing in for a promptable
foundation segmenter: it produces the same data contract (a per-pixel
confidence map in [0, 1]) behind a small interface, so a heavier backend
can be swapped in without touching the fusion engine.
"""

from __future__ import annotations

import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .render import ViewGeometry

__all__ = ["SegmenterConfig", "ConfidenceMask", "segment_from_prompt",
           "refine_mask", "MaskQueue"]

_EPS = 1e-12


@dataclass(frozen=True)
class SegmenterConfig:
    color_tol: float = 0.25      # max RGB distance to the seed color
    depth_tol: float = 0.05      # max relative d_exp step between neighbors
    connectivity: int = 8        # 4 or 8
    falloff_px: float = 2.0      # confidence decay width outside the core
    # imperfect-mask mode (off by default): dilation plus salt noise,
    # mimicking false positives and boundary artifacts of a real model
    dilate_px: int = 0
    salt_prob: float = 0.0
    salt_seed: int = 0

    def __post_init__(self):
        if self.color_tol <= 0 or self.depth_tol <= 0 or self.falloff_px <= 0:
            raise ValueError("tolerances must be positive")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


@dataclass
class ConfidenceMask:
    """Per-pixel segmentation confidence in [0, 1]."""

    values: np.ndarray  # (H, W) float32
    refined: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("mask must be 2D")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("mask confidences must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


_OFFSETS4 = ((1, 0), (-1, 0), (0, 1), (0, -1))
_OFFSETS8 = _OFFSETS4 + ((1, 1), (1, -1), (-1, 1), (-1, -1))


def segment_from_prompt(view: ViewGeometry, prompt, cfg: SegmenterConfig) -> ConfidenceMask:
    """Grow a region from the prompt pixel over color and depth coherence.

    A neighbor is admitted when its color is within `color_tol` of the seed
    color and its expected depth differs relatively by at most `depth_tol`
    from the pixel it is reached from.  Admission is retried from every
    admitted neighbor, so the result is the path closure and independent of
    traversal order.  Confidence is 1 on the grown core and decays linearly
    to 0 over `falloff_px` pixels outside it.
    """
    px, py = int(prompt[0]), int(prompt[1])
    h, w = view.d_exp.shape
    if not (0 <= px < w and 0 <= py < h):
        raise ValueError(f"prompt ({px}, {py}) outside the {w}x{h} image")
    valid = view.valid
    if not valid[py, px]:
        raise ValueError("no surface under prompt")

    rgb = view.rgb.astype(np.float64)
    depth = view.d_exp.astype(np.float64)
    seed_color = rgb[py, px]
    color_ok = np.linalg.norm(rgb - seed_color, axis=-1) <= cfg.color_tol
    offsets = _OFFSETS4 if cfg.connectivity == 4 else _OFFSETS8

    core = np.zeros((h, w), dtype=bool)
    core[py, px] = True
    frontier = deque([(px, py)])
    while frontier:
        x, y = frontier.popleft()
        d_here = depth[y, x]
        for ox, oy in offsets:
            nx, ny = x + ox, y + oy
            if nx < 0 or ny < 0 or nx >= w or ny >= h or core[ny, nx]:
                continue
            if not valid[ny, nx] or not color_ok[ny, nx]:
                continue
            if abs(depth[ny, nx] - d_here) / max(d_here, _EPS) > cfg.depth_tol:
                continue
            core[ny, nx] = True
            frontier.append((nx, ny))

    if cfg.dilate_px > 0:
        r = cfg.dilate_px
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        core = ndimage.binary_dilation(core, structure=xx * xx + yy * yy <= r * r)

    conf = np.ones((h, w), dtype=np.float64)
    outside = ~core
    if outside.any():
        dist = ndimage.distance_transform_edt(outside)
        conf[outside] = np.clip(1.0 - dist[outside] / cfg.falloff_px, 0.0, 1.0)

    if cfg.salt_prob > 0.0:
        rng = np.random.default_rng((cfg.salt_seed, px, py))
        salt = rng.random((h, w)) < cfg.salt_prob
        conf = np.where(salt, np.maximum(conf, 0.9), conf)

    return ConfidenceMask(conf.astype(np.float32), refined=False)


def refine_mask(mask: ConfidenceMask, view: ViewGeometry) -> ConfidenceMask:
    """Depth-weight a confidence mask by one minus the normalized depth.

    The surface-depth map is min-max normalized over the view's valid
    pixels; output confidence is mask * (1 - normalized depth).  Pixels
    without a surface get 0.  A constant depth map normalizes to 0, so
    refinement is then a no-op.
    """
    if mask.refined:
        raise ValueError("mask is already refined")
    if mask.shape != view.z_surface.shape:
        raise ValueError("mask and view dimensions differ")
    valid = view.valid
    out = np.zeros_like(mask.values, dtype=np.float64)
    if valid.any():
        z = view.z_surface.astype(np.float64)
        z_lo = z[valid].min()
        z_hi = z[valid].max()
        if z_hi - z_lo > 0:
            z_hat = (z - z_lo) / (z_hi - z_lo)
        else:
            z_hat = np.zeros_like(z)
        out[valid] = mask.values[valid] * (1.0 - z_hat[valid])
    return ConfidenceMask(np.clip(out, 0.0, 1.0).astype(np.float32), refined=True)


class MaskQueue:
    """Asynchronous mask computation with barrier semantics.

    Masks are computed on worker threads while the caller keeps going.  A
    barrier is *required* when either (i) a request flagged last-in-group
    was submitted, or (ii) at least `cache_threshold` completed masks sit
    in the cache.  `barrier()` waits for every pending request, returns all
    cached results and flushes the cache.
    """

    def __init__(self, segment_fn=segment_from_prompt, workers: int = 2,
                 cache_threshold: int = 3, on_complete=None):
        self._segment = segment_fn
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._lock = threading.RLock()
        self._done_cv = threading.Condition(self._lock)
        self._pending = {}
        self._done = {}
        self._errors = {}
        self._last_flag = False
        self._shutdown = False
        self.cache_threshold = cache_threshold
        self._on_complete = on_complete

    def submit(self, request_id, view, prompt, cfg, last_in_group=False):
        with self._lock:
            if self._shutdown:
                raise RuntimeError("queue is shut down")
            if request_id in self._pending or request_id in self._done:
                raise ValueError(f"duplicate request id {request_id!r}")
            self._pending[request_id] = None
            if last_in_group:
                self._last_flag = True
        fut = self._pool.submit(self._segment, view, prompt, cfg)
        with self._lock:
            if request_id in self._pending:
                self._pending[request_id] = fut
        fut.add_done_callback(lambda f, rid=request_id: self._finish(rid, f))
        return request_id

    def _finish(self, request_id, fut):
        callback = None
        result = None
        with self._done_cv:
            if request_id not in self._pending:
                return
            del self._pending[request_id]
            if fut.cancelled():
                self._errors[request_id] = "cancelled"
            else:
                err = fut.exception()
                if err is not None:
                    self._errors[request_id] = err
                else:
                    result = fut.result()
                    self._done[request_id] = result
                    callback = self._on_complete
            self._done_cv.notify_all()
        # callback runs outside the queue lock so listeners may call back in
        if callback is not None:
            callback(request_id, result)

    def completed_count(self) -> int:
        with self._lock:
            return len(self._done)

    def barrier_required(self) -> bool:
        with self._lock:
            return self._last_flag or len(self._done) >= self.cache_threshold

    def wait_barrier_required(self, timeout=None) -> bool:
        with self._done_cv:
            return self._done_cv.wait_for(
                lambda: self._last_flag or len(self._done) >= self.cache_threshold,
                timeout)

    def barrier(self) -> dict:
        """Wait for all in-flight requests, return and flush cached masks."""
        with self._done_cv:
            self._done_cv.wait_for(lambda: not self._pending)
            errors = dict(self._errors)
            self._errors.clear()
            if errors:
                first = next(iter(errors.values()))
                self._done.clear()
                self._last_flag = False
                if isinstance(first, str):
                    raise RuntimeError(f"requests failed: {errors}")
                raise first
            results = dict(self._done)
            self._done.clear()
            self._last_flag = False
            return results

    def shutdown(self) -> list:
        """Cancel outstanding work; returns ids of requests left unfinished."""
        with self._lock:
            self._shutdown = True
            items = list(self._pending.items())
        # cancel outside the lock: a successful cancel invokes _finish
        # synchronously on this thread
        for _rid, fut in items:
            if fut is not None:
                fut.cancel()
        self._pool.shutdown(wait=True, cancel_futures=True)
        with self._lock:
            cancelled = {rid for rid, err in self._errors.items()
                         if err == "cancelled"}
            cancelled.update(self._pending)
            self._pending.clear()
            for rid in list(cancelled):
                self._errors.pop(rid, None)
        return sorted(cancelled, key=str)
