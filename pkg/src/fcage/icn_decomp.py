"""Sparse non-negative network decomposition of 4D volumes.

A two-stage scheme: a group fit shares one set of non-negative spatial
maps across subjects while each subject keeps free temporal loadings;
subject-level refinement then warm-starts from the group maps so
component order (and thus channel semantics downstream) is preserved
across subjects.

The group objective is

    sum_s ||X_s - W_s H||_F^2  +  sparsity * ||H||_1,    H >= 0

with X_s the (T, V) masked voxel data of subject s.  W_s is updated by
exact least squares, H by the multiplicative square-root rule for
semi-non-negative factorizations, which keeps H non-negative and the
objective non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import volume_io

DEFAULT_SPARSITY = 0.1
_EPS = 1e-12


class DegenerateComponentError(RuntimeError):
    """A spatial component collapsed to all zeros twice."""


@dataclass
class ICNSet:
    """Subject-specific network maps and their time courses.

    spatial: (K, V) non-negative, each row max-normalized to 1.
    timecourses: (K, T), each row zero-mean.
    mask: (Z, Y, X) bool selecting the V in-mask voxels.
    """

    spatial: np.ndarray
    timecourses: np.ndarray
    mask: np.ndarray

    @property
    def k(self) -> int:
        return self.spatial.shape[0]


@dataclass
class GroupDecomposition:
    """Shared spatial maps from a multi-subject fit, plus fit metadata."""

    maps: np.ndarray  # (K, V), non-negative
    mask: np.ndarray  # (Z, Y, X) bool
    sparsity: float
    seed: int
    iters: int
    objective: list[float]

    @property
    def k(self) -> int:
        return self.maps.shape[0]


def compute_mask(volumes: list[np.ndarray]) -> np.ndarray:
    """Voxels whose time series varies in every volume."""
    if not volumes:
        raise ValueError("empty volume list")
    mask = None
    for vol in volumes:
        var = np.asarray(vol, dtype=np.float64).var(axis=0)
        m = var > 0.0
        mask = m if mask is None else (mask & m)
    return mask


def volume_to_matrix(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Flatten a (T, Z, Y, X) volume to (T, V) over the mask."""
    vol = np.asarray(volume)
    if vol.ndim != 4:
        raise ValueError(f"expected a 4D volume, got shape {vol.shape}")
    if vol.shape[1:] != mask.shape:
        raise ValueError(f"volume grid {vol.shape[1:]} != mask grid {mask.shape}")
    return vol.reshape(vol.shape[0], -1)[:, mask.ravel()]


def _solve_loadings(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Least-squares W minimizing ||X - W H||_F for fixed H."""
    hht = h @ h.T
    xht = x @ h.T
    try:
        return np.linalg.solve(hht, xht.T).T
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(hht, xht.T, rcond=None)[0].T


def _update_maps(h, a, b, sparsity):
    """Multiplicative H step for the semi-non-negative objective.

    a = sum_s W_s' X_s (K, V); b = sum_s W_s' W_s (K, K).  The L1 weight
    folds into the linear term of the quadratic.
    """
    a_eff = a - 0.5 * sparsity
    a_pos = 0.5 * (np.abs(a_eff) + a_eff)
    a_neg = 0.5 * (np.abs(a_eff) - a_eff)
    b_pos = 0.5 * (np.abs(b) + b)
    b_neg = 0.5 * (np.abs(b) - b)
    num = a_pos + b_neg @ h
    den = a_neg + b_pos @ h
    return h * np.sqrt(num / np.maximum(den, _EPS))


def _reseed_degenerate(h, mats, loadings, already, rng):
    """Replace all-zero spatial rows with the positive part of the mean residual."""
    dead = np.flatnonzero(h.max(axis=1) <= _EPS)
    for k in dead:
        if k in already:
            raise DegenerateComponentError(f"component {k} degenerated twice")
        resid = np.zeros(h.shape[1])
        for x, w in zip(mats, loadings):
            resid += (np.asarray(x, dtype=np.float64) - w @ h).mean(axis=0)
        resid /= len(mats)
        row = np.maximum(resid, 0.0)
        if row.max() <= _EPS:
            row = np.abs(resid)
        if row.max() <= _EPS:
            row = rng.uniform(0.1, 1.1, size=h.shape[1])
        h[k] = row / row.max()
        already.add(k)


def fit_group_icns(
    volumes: list[np.ndarray],
    k: int,
    sparsity: float = DEFAULT_SPARSITY,
    iters: int = 100,
    seed: int = 0,
    mask: np.ndarray | None = None,
) -> GroupDecomposition:
    """Fit K shared non-negative spatial maps across subjects.

    The objective (reconstruction + L1 on the maps) is recorded per
    iteration and is non-increasing.  All arithmetic runs in float64
    regardless of the stored volume dtype.
    """
    if not volumes:
        raise ValueError("empty volume list")
    if mask is None:
        mask = compute_mask(volumes)
    mats = [volume_to_matrix(v, mask) for v in volumes]
    for x in mats:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite values in input volume")
    v = mats[0].shape[1]
    total_t = sum(x.shape[0] for x in mats)
    if not 1 <= k < min(v, total_t):
        raise ValueError(f"k={k} out of range for V={v}, total T={total_t}")
    if sparsity < 0:
        raise ValueError("sparsity must be non-negative")

    # ||X||^2 once; per-iteration objective then follows from the
    # aggregated statistics without another data pass.
    sum_x2 = sum(float(np.vdot(x, x)) for x in (m.astype(np.float64) for m in mats))

    rng = np.random.default_rng(seed)
    h = rng.uniform(0.1, 1.1, size=(k, v))
    reseeded: set[int] = set()
    objective: list[float] = []
    for _ in range(iters):
        a = np.zeros((k, v))
        b = np.zeros((k, k))
        loadings = []
        for x in mats:
            x64 = x if x.dtype == np.float64 else x.astype(np.float64)
            w = _solve_loadings(x64, h)
            a += w.T @ x64
            b += w.T @ w
            loadings.append(w)
        h = _update_maps(h, a, b, sparsity)
        assert h.min() >= 0.0
        _reseed_degenerate(h, mats, loadings, reseeded, rng)
        obj = (
            sum_x2
            - 2.0 * float(np.vdot(a, h))
            + float(np.vdot(h, b @ h))
            + float(sparsity) * float(h.sum())
        )
        objective.append(obj)
    return GroupDecomposition(
        maps=h, mask=mask, sparsity=sparsity, seed=seed, iters=iters,
        objective=objective,
    )


def fit_subject_icns(
    volume: np.ndarray,
    group_maps: np.ndarray,
    mask: np.ndarray,
    sparsity: float = DEFAULT_SPARSITY,
    iters: int = 30,
) -> ICNSet:
    """Refine group maps on one subject's data.

    Warm-starting from the group maps inherits component order, so
    channel k means the same network for every subject.  iters=0
    returns the group maps themselves (max-normalized).
    """
    group_maps = np.asarray(group_maps, dtype=np.float64)
    if group_maps.ndim != 2:
        raise ValueError("group_maps must be (K, V)")
    x = volume_to_matrix(volume, mask).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input volume")
    if x.shape[1] != group_maps.shape[1]:
        raise ValueError(
            f"group maps have {group_maps.shape[1]} voxels, volume mask {x.shape[1]}"
        )
    h = group_maps.copy()
    rng = np.random.default_rng(0)
    reseeded: set[int] = set()
    for _ in range(iters):
        w = _solve_loadings(x, h)
        a = w.T @ x
        b = w.T @ w
        h = _update_maps(h, a, b, sparsity)
        assert h.min() >= 0.0
        _reseed_degenerate(h, [x], [w], reseeded, rng)

    peaks = h.max(axis=1)
    if np.any(peaks <= 0.0):
        raise DegenerateComponentError("all-zero spatial component after refinement")
    spatial = h / peaks[:, None]
    timecourses = extract_timecourses(volume, spatial, mask)
    return ICNSet(spatial=spatial, timecourses=timecourses, mask=mask)


def extract_timecourses(
    volume: np.ndarray, spatial: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Spatial-map-weighted mean voxel series per component, zero-meaned."""
    x = volume_to_matrix(volume, mask).astype(np.float64)
    spatial = np.asarray(spatial, dtype=np.float64)
    if spatial.shape[1] != x.shape[1]:
        raise ValueError("spatial maps and volume disagree on voxel count")
    sums = spatial.sum(axis=1)
    if np.any(sums <= 0.0):
        raise ValueError("spatial row sums to zero; cannot form weights")
    weights = spatial / sums[:, None]
    tc = weights @ x.T
    return tc - tc.mean(axis=1, keepdims=True)


def save_icn_set(prefix, icns: ICNSet, meta: dict | None = None) -> None:
    """Persist an ICNSet as two BVOL tensors plus a JSON sidecar."""
    volume_io.write_bvol(f"{prefix}.spatial.bvol", icns.spatial.astype(np.float32))
    volume_io.write_bvol(
        f"{prefix}.timecourses.bvol", icns.timecourses.astype(np.float32)
    )
    volume_io.write_bvol(f"{prefix}.mask.bvol", icns.mask.astype(np.float32))
    sidecar = {"k": int(icns.k)}
    if meta:
        sidecar.update(meta)
    with open(f"{prefix}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_icn_set(prefix) -> ICNSet:
    spatial = volume_io.read_bvol(f"{prefix}.spatial.bvol").astype(np.float64)
    timecourses = volume_io.read_bvol(f"{prefix}.timecourses.bvol").astype(np.float64)
    mask = volume_io.read_bvol(f"{prefix}.mask.bvol") > 0.5
    return ICNSet(spatial=spatial, timecourses=timecourses, mask=mask)
