"""Prompt extraction, promptable-oracle backends and pseudo-labels.

Backends take an image patch and point prompts and return a binary mask.
``SyntheticOracle`` stands in for a foundation model during tests by degrading
known ground truth; ``SpoolAdapter`` talks to an out-of-process model through
paired files in a spool directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .volumes import as_binary_mask, crop, pad_to, read_raw, save_mask, save_volume

logger = logging.getLogger(__name__)

WIRE_VERSION = 1
POSITIVE, NEGATIVE = 1, 0
MIN_SEPARATION = 4.0
_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class PromptSet:
    """Ordered point prompts as (z, y, x, polarity)."""

    points: list = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    def __bool__(self):
        return bool(self.points)

    def key(self) -> tuple:
        return tuple(tuple(int(v) for v in p) for p in self.points)

    def positives(self) -> list:
        return [p[:3] for p in self.points if p[3] == POSITIVE]

    def to_json(self) -> list:
        return [list(map(int, p)) for p in self.points]


@dataclass
class PseudoLabel:
    mask: Optional[np.ndarray]
    backend: str
    prompts: PromptSet
    elapsed_ms: float = 0.0
    skipped: bool = False
    reason: str = ""


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_SIX)
    if n == 0:
        return np.zeros(mask.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def extract_prompts(prob_map, k_positive: int = 1, rng: Optional[np.random.Generator] = None) -> PromptSet:
    """Positive prompts from a (C, D, H, W) probability map or a binary (D, H, W) mask.

    The first point is the deepest voxel of the largest foreground component,
    so it lies inside even for non-convex shapes. Further points are drawn from
    the component interior, at least 4 voxels apart when possible.
    """
    if k_positive < 1:
        raise ValueError("k_positive must be at least 1")
    pm = np.asarray(prob_map)
    fg = pm[1] > 0.5 if pm.ndim == 4 else pm > 0.5
    comp = largest_component(fg)
    if not comp.any():
        return PromptSet()

    depth = ndimage.distance_transform_edt(comp)
    first = np.unravel_index(int(np.argmax(depth)), comp.shape)
    points = [tuple(int(c) for c in first)]

    if k_positive > 1:
        rng = rng if rng is not None else np.random.default_rng(0)
        interior = np.argwhere(depth > 1)
        if len(interior) == 0:
            interior = np.argwhere(comp)
        candidates = interior[rng.permutation(len(interior))]
        chosen = np.array(points, dtype=np.float64)
        fallback = []
        for cand in candidates:
            if len(points) >= k_positive:
                break
            if np.min(np.linalg.norm(chosen - cand, axis=1)) >= MIN_SEPARATION:
                points.append(tuple(int(c) for c in cand))
                chosen = np.vstack([chosen, cand])
            elif len(fallback) < k_positive:
                fallback.append(tuple(int(c) for c in cand))
        # not enough well-separated voxels: take the closest ones anyway
        for cand in fallback:
            if len(points) >= k_positive:
                break
            if cand not in points:
                points.append(cand)
    return PromptSet([(*p, POSITIVE) for p in points])


# ---------------------------------------------------------------------------
# synthetic degradation


def boundary_adjacent(mask: np.ndarray) -> np.ndarray:
    """Voxels on either side of the foreground/background interface (6-neighbourhood)."""
    m = mask.astype(bool)
    inner = m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=1)
    outer = ~m & ndimage.binary_dilation(m, structure=_SIX)
    return inner | outer


def synth_oracle(ground_truth, degradation=(0, 0.0), rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Dilate (r > 0) or erode (r < 0) by |r| voxels, then flip interface voxels with probability p."""
    r, p = degradation
    m = np.asarray(ground_truth).astype(bool)
    if r > 0:
        m = ndimage.distance_transform_edt(~m) <= r
    elif r < 0:
        m = ndimage.distance_transform_edt(m) > -r
    if p > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        edge = boundary_adjacent(m)
        flips = edge & (rng.random(m.shape) < p)
        m = m ^ flips
    return m.astype(np.uint8)


# ---------------------------------------------------------------------------
# backends


@dataclass
class OracleRequest:
    patch: np.ndarray
    prompts: PromptSet
    spacing: tuple = (1.0, 1.0, 1.0)
    case_id: Optional[str] = None
    offset: Optional[tuple] = None
    request_id: str = field(default_factory=lambda: uuid.uuid4().hex)


class OracleUnavailable(RuntimeError):
    pass


class SyntheticOracle:
    """Degraded ground truth restricted to components touched by a positive prompt.

    Ground-truth masks are registered per case id; requests must name the case
    and the (padded) patch offset. Randomness is keyed on the request so cached
    and uncached answers agree.
    """

    kind = "synthetic"

    def __init__(self, masks: dict, degradation=(1, 0.05), seed: int = 0, snap_radius: float = 2.0):
        self.masks = masks
        self.degradation = tuple(degradation)
        self.seed = seed
        self.snap_radius = snap_radius

    def _rng(self, request: OracleRequest) -> np.random.Generator:
        h = hashlib.sha256(repr((self.seed, request.case_id, request.offset, request.prompts.key())).encode())
        return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))

    def __call__(self, request: OracleRequest) -> np.ndarray:
        if request.case_id not in self.masks:
            raise OracleUnavailable(f"no reference mask for case {request.case_id!r}")
        shape = request.patch.shape
        full = pad_to(self.masks[request.case_id], shape)[0]
        gt = crop(full, request.offset or (0, 0, 0), shape).astype(bool)

        labels, _ = ndimage.label(gt, structure=_SIX)
        # a prompt that misses the object by a voxel or two still selects it
        dist, (iz, iy, ix) = ndimage.distance_transform_edt(labels == 0, return_indices=True)
        keep = set()
        for z, y, x in request.prompts.positives():
            if dist[z, y, x] <= self.snap_radius:
                keep.add(int(labels[iz[z, y, x], iy[z, y, x], ix[z, y, x]]))
        target = np.isin(labels, sorted(keep)) if keep else np.zeros(shape, dtype=bool)
        return synth_oracle(target, self.degradation, self._rng(request))


class NullOracle:
    """Backend that is never available; every query is skipped."""

    kind = "null"

    def __call__(self, request: OracleRequest) -> np.ndarray:
        raise OracleUnavailable("null oracle")


def write_request(spool, request: OracleRequest) -> Path:
    spool = Path(spool)
    req_dir = spool / "requests"
    req_dir.mkdir(parents=True, exist_ok=True)
    save_volume(req_dir / f"{request.request_id}.nii.gz", request.patch, request.spacing)
    meta = {
        "version": WIRE_VERSION,
        "request_id": request.request_id,
        "patch": f"{request.request_id}.nii.gz",
        "shape": list(request.patch.shape),
        "spacing": list(request.spacing),
        "prompts": request.prompts.to_json(),
    }
    path = req_dir / f"{request.request_id}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta))
    tmp.rename(path)  # the sidecar appears last and atomically
    return path


def read_request(path) -> OracleRequest:
    path = Path(path)
    meta = json.loads(path.read_text())
    if meta.get("version") != WIRE_VERSION:
        raise ValueError(f"unsupported wire version {meta.get('version')}")
    patch, _ = read_raw(path.parent / meta["patch"])
    return OracleRequest(
        patch=np.asarray(patch, dtype=np.float32),
        prompts=PromptSet([tuple(p) for p in meta["prompts"]]),
        spacing=tuple(meta["spacing"]),
        request_id=meta["request_id"],
    )


def write_response(spool, request_id: str, mask: np.ndarray, model_name: str, elapsed_ms: float, spacing=(1.0, 1.0, 1.0)) -> Path:
    resp_dir = Path(spool) / "responses"
    resp_dir.mkdir(parents=True, exist_ok=True)
    save_mask(resp_dir / f"{request_id}.nii.gz", mask, spacing)
    meta = {
        "version": WIRE_VERSION,
        "request_id": request_id,
        "mask": f"{request_id}.nii.gz",
        "model_name": model_name,
        "elapsed_ms": float(elapsed_ms),
    }
    path = resp_dir / f"{request_id}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta))
    tmp.rename(path)
    return path


def serve_spool(spool, model: Callable[[OracleRequest], np.ndarray], model_name: str = "model", once: bool = True, poll: float = 0.05) -> int:
    """Answer pending spool requests with ``model``; the external side of the adapter contract."""
    req_dir = Path(spool) / "requests"
    served = 0
    while True:
        for path in sorted(req_dir.glob("*.json")) if req_dir.exists() else []:
            start = time.perf_counter()
            req = read_request(path)
            mask = model(req)
            write_response(spool, req.request_id, mask, model_name, 1000 * (time.perf_counter() - start), req.spacing)
            path.unlink()
            (req_dir / f"{req.request_id}.nii.gz").unlink(missing_ok=True)
            served += 1
        if once:
            return served
        time.sleep(poll)


class SpoolAdapter:
    """Out-of-process oracle reached through a spool directory."""

    kind = "external_adapter"

    def __init__(self, spool, timeout: float = 30.0, poll: float = 0.02):
        self.spool = Path(spool)
        self.timeout = timeout
        self.poll = poll
        self.last_model_name = None

    def __call__(self, request: OracleRequest) -> np.ndarray:
        try:
            write_request(self.spool, request)
        except OSError as exc:
            raise OracleUnavailable(f"cannot write to spool {self.spool}: {exc}") from exc
        resp = self.spool / "responses" / f"{request.request_id}.json"
        deadline = time.monotonic() + self.timeout
        while not resp.exists():
            if time.monotonic() >= deadline:
                self._discard(request.request_id)
                raise OracleUnavailable(f"no response for {request.request_id} within {self.timeout}s")
            time.sleep(min(self.poll, max(deadline - time.monotonic(), 0)))
        meta = json.loads(resp.read_text())
        if meta.get("request_id") != request.request_id:
            raise OracleUnavailable("response id does not match request")
        mask, _ = read_raw(resp.parent / meta["mask"])
        self.last_model_name = meta.get("model_name")
        resp.unlink()
        (resp.parent / meta["mask"]).unlink(missing_ok=True)
        return as_binary_mask(mask, request.patch.shape)

    def _discard(self, request_id):
        for suffix in (".json", ".nii.gz"):
            (self.spool / "requests" / f"{request_id}{suffix}").unlink(missing_ok=True)


def query_oracle(backend, patch, prompts: PromptSet, **request_kw) -> PseudoLabel:
    """Query ``backend`` and binarize the answer; failures come back as skipped labels."""
    if not prompts:
        raise ValueError("query_oracle needs at least one prompt")
    patch = np.asarray(patch)
    request = OracleRequest(patch=patch, prompts=prompts, **request_kw)
    kind = getattr(backend, "kind", type(backend).__name__)
    start = time.perf_counter()
    try:
        mask = as_binary_mask(backend(request), patch.shape)
    except Exception as exc:  # the trainer must survive any backend failure
        logger.warning("oracle %s skipped: %s", kind, exc)
        return PseudoLabel(None, kind, prompts, 1000 * (time.perf_counter() - start), skipped=True, reason=str(exc))
    return PseudoLabel(mask, kind, prompts, 1000 * (time.perf_counter() - start))


class CachedOracle:
    """LRU cache over query_oracle keyed by (case, offset, prompts)."""

    def __init__(self, backend, maxsize: int = 256):
        self.backend = backend
        self.maxsize = maxsize
        self._cache: OrderedDict = OrderedDict()
        self.hits = self.misses = 0

    def __call__(self, patch, prompts: PromptSet, case_id=None, offset=None, spacing=(1.0, 1.0, 1.0)) -> PseudoLabel:
        key = (case_id, tuple(offset) if offset is not None else None, prompts.key())
        if case_id is not None and key in self._cache:
            self.hits += 1
            self._cache.move_to_end(key)
            return self._cache[key]
        self.misses += 1
        label = query_oracle(self.backend, patch, prompts, case_id=case_id, offset=offset, spacing=spacing)
        # skips are not cached so a recovering backend is retried
        if case_id is not None and not label.skipped and self.maxsize > 0:
            self._cache[key] = label
            if len(self._cache) > self.maxsize:
                self._cache.popitem(last=False)
        return label


def build_backend(kind: str, masks: Optional[dict] = None, degradation=(1, 0.05), seed: int = 0, spool=None, timeout: float = 30.0):
    if kind == "synthetic":
        return SyntheticOracle(masks or {}, degradation, seed)
    if kind == "external_adapter":
        if spool is None:
            raise ValueError("external_adapter backend needs a spool directory")
        return SpoolAdapter(spool, timeout)
    if kind == "null":
        return NullOracle()
    raise ValueError(f"unknown oracle backend {kind!r}")


def prompts_record(case_id, prompts: PromptSet, offset=None) -> dict:
    return {"case_id": case_id, "offset": list(offset) if offset is not None else None, "points": prompts.to_json()}
