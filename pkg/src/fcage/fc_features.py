"""Voxel-wise and inter-network functional-connectivity features.

For each network, the fine-grained FC map holds the Fisher-z Pearson
correlation between that network's time course and every in-mask voxel
series; stacking the K maps gives the multi-channel 3D image the CNN
consumes.  The coarse counterpart is the K(K-1)/2 vector of Fisher-z
correlations between network time courses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .icn_decomp import ICNSet

# Correlations are clamped to |r| <= 1 - CLAMP_EPS before atanh so every
# z-value stays finite.
CLAMP_EPS = 1e-7


@dataclass
class FCImage:
    """K-channel 3D image of Fisher-z FC values."""

    data: np.ndarray  # (K, Z, Y, X)
    channel_order: list[int]

    @property
    def k(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation; 0 if either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be 1-D and equal length")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    r = float(np.sum(xc * yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def fisher_z(r) -> float | np.ndarray:
    """atanh of r clamped away from +-1; rejects |r| > 1."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(np.abs(r) > 1.0):
        raise ValueError("|r| > 1")
    z = np.arctanh(np.clip(r, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS))
    return float(z) if z.ndim == 0 else z


def _block_mean_downsample(data: np.ndarray, factors: tuple[int, int, int]) -> np.ndarray:
    """Block-mean over (fz, fy, fx) blocks, zero-padding non-dividing grids."""
    if any(f < 1 for f in factors):
        raise ValueError(f"downsample factors must be >= 1, got {factors}")
    if factors == (1, 1, 1):
        return data
    k, z, y, x = data.shape
    fz, fy, fx = factors
    pz, py, px = (-z) % fz, (-y) % fy, (-x) % fx
    if pz or py or px:
        data = np.pad(data, ((0, 0), (0, pz), (0, py), (0, px)))
    k, z, y, x = data.shape
    blocks = data.reshape(k, z // fz, fz, y // fy, fy, x // fx, fx)
    return blocks.mean(axis=(2, 4, 6))


def fc_image(
    volume: np.ndarray,
    icns: ICNSet,
    downsample: tuple[int, int, int] = (1, 1, 1),
) -> FCImage:
    """Per-network voxel-wise Fisher-z FC maps, then block-mean downsampling.

    Out-of-mask and zero-variance voxels carry z = 0.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 4 or vol.shape[1:] != icns.mask.shape:
        raise ValueError(
            f"volume shape {vol.shape} does not match mask grid {icns.mask.shape}"
        )
    t = vol.shape[0]
    if icns.timecourses.shape[1] != t:
        raise ValueError("time course length does not match volume")
    if not np.all(np.isfinite(vol)):
        raise ValueError("non-finite input volume")

    flat = vol.reshape(t, -1)[:, icns.mask.ravel()]
    flat = flat - flat.mean(axis=0)
    norms = np.sqrt(np.sum(flat * flat, axis=0))
    safe = norms > 0.0
    flat[:, safe] /= norms[safe]

    tc = icns.timecourses - icns.timecourses.mean(axis=1, keepdims=True)
    tc_norms = np.sqrt(np.sum(tc * tc, axis=1))
    tc_safe = tc_norms > 0.0
    tc = np.where(tc_safe[:, None], tc / np.where(tc_safe, tc_norms, 1.0)[:, None], 0.0)

    r = tc @ flat  # (K, V)
    r[:, ~safe] = 0.0
    np.clip(r, -1.0, 1.0, out=r)
    z = fisher_z(r)

    k = icns.k
    full = np.zeros((k, icns.mask.size))
    full[:, icns.mask.ravel()] = z
    full = full.reshape(k, *icns.mask.shape)
    data = _block_mean_downsample(full, tuple(downsample))
    return FCImage(data=data.astype(np.float32), channel_order=list(range(k)))


def inter_icn_fc(icns: ICNSet) -> np.ndarray:
    """Fisher-z correlations for all time-course pairs i < j, lexicographic."""
    k = icns.k
    if k < 2:
        raise ValueError("need at least 2 components")
    out = np.empty(k * (k - 1) // 2)
    pos = 0
    for i in range(k):
        for j in range(i + 1, k):
            out[pos] = fisher_z(pearson(icns.timecourses[i], icns.timecourses[j]))
            pos += 1
    return out
