"""Synthetic developmental cohorts with a planted, age-dependent FC signal.

The generative model, fully deterministic given the seed:

* K spatially smooth, compactly supported, non-negative component maps
  (Gaussian blobs, width 1.5 voxels, truncated at 0.05) shared by all
  subjects.
* Per subject, K latent time courses.  For a designated set of
  component pairs, the pairwise correlation drifts linearly with age --
  this is the coarse signal an inter-network FC vector can see.
* Per voxel, the signal is the component-weighted mixture of time
  courses plus white Gaussian noise.  Voxels in the designated
  fine-grained set have mixing weights that scale linearly with age,
  which only voxel-wise FC maps can see.

Ages are uniform over the configured range.  The fine and coarse
signals both scale with ``signal_strength``; at 0 nothing in the data
predicts age.  Per-subject random streams are split by (seed, subject
index), so parallel and serial generation agree bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .volume_io import CohortManifest, SubjectRecord, write_bvol, write_manifest

BLOB_SIGMA = 1.5
SUPPORT_CUTOFF = 0.05
FINE_CUTOFF = 0.25
FINE_BASE_WEIGHT = 0.6
FINE_AGE_SLOPE = 1.0
PAIR_BASE_CORR = 0.3
PAIR_AGE_SLOPE = 0.5


@dataclass
class SynthConfig:
    n_subjects: int = 200
    grid: tuple[int, int, int] = (16, 16, 16)
    n_timepoints: int = 120
    n_components: int = 8
    age_range: tuple[float, float] = (8.0, 22.0)
    signal_strength: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 7

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if self.n_components < 2:
            raise ValueError("need at least 2 components")
        if self.n_timepoints < 4 * self.n_components:
            raise ValueError("n_timepoints must be >= 4 * n_components")
        if any(g < 4 for g in self.grid):
            raise ValueError("each grid extent must be >= 4")
        lo, hi = self.age_range
        if not lo < hi:
            raise ValueError("age_range.min must be < age_range.max")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")


def _cohort_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))


def _subject_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, index)))


def _draw_centers(rng, grid, k):
    """Blob centers with a soft minimum-separation rule."""
    margin = 2
    lows = [min(margin, (g - 1) // 2) for g in grid]
    centers: list[np.ndarray] = []
    for _ in range(k):
        best = None
        for attempt in range(200):
            cand = np.array(
                [rng.integers(lo, g - lo) for lo, g in zip(lows, grid)], dtype=float
            )
            if not centers:
                best = cand
                break
            dist = min(np.linalg.norm(cand - c) for c in centers)
            if dist >= 4.0:
                best = cand
                break
            if best is None or dist > min(
                np.linalg.norm(best - c) for c in centers
            ):
                best = cand
        centers.append(best)
    return np.array(centers)


def make_component_maps(grid, k, rng) -> np.ndarray:
    """K non-negative blobs on the full grid, each max-normalized to 1."""
    centers = _draw_centers(rng, grid, k)
    zz, yy, xx = np.meshgrid(*(np.arange(g, dtype=float) for g in grid), indexing="ij")
    maps = np.zeros((k, *grid))
    for i, c in enumerate(centers):
        d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        blob = np.exp(-d2 / (2.0 * BLOB_SIGMA**2))
        blob[blob < SUPPORT_CUTOFF] = 0.0
        maps[i] = blob
    return maps


def _designated_pairs(k: int) -> list[tuple[int, int]]:
    n_pairs = max(1, k // 4)
    return [(2 * i, 2 * i + 1) for i in range(n_pairs)]


def _fine_components(k: int) -> list[int]:
    start = 2 * max(1, k // 4)
    comps = list(range(start, k))
    return comps if comps else [k - 1]


def generate_cohort(cfg: SynthConfig, out_dir) -> CohortManifest:
    """Write one (T, Z, Y, X) volume per subject plus manifest and metadata."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    k = cfg.n_components
    t = cfg.n_timepoints
    grid = tuple(cfg.grid)
    n_vox = int(np.prod(grid))

    crng = _cohort_rng(cfg.seed)
    lo, hi = cfg.age_range
    ages = crng.uniform(lo, hi, cfg.n_subjects)
    maps = make_component_maps(grid, k, crng)
    flat_maps = maps.reshape(k, n_vox)

    pairs = _designated_pairs(k)
    fine_comps = _fine_components(k)
    fine_voxels = {c: np.flatnonzero(flat_maps[c] >= FINE_CUTOFF) for c in fine_comps}

    records = []
    for s in range(cfg.n_subjects):
        a_norm = (ages[s] - lo) / (hi - lo)
        rng = _subject_rng(cfg.seed, s)
        latent = rng.standard_normal((k, t))
        tc = latent.copy()
        for i, j in pairs:
            rho = PAIR_BASE_CORR + cfg.signal_strength * PAIR_AGE_SLOPE * (a_norm - 0.5)
            rho = float(np.clip(rho, -0.95, 0.95))
            tc[j] = rho * latent[i] + np.sqrt(1.0 - rho**2) * latent[j]

        mixing = flat_maps.copy()  # (K, V) per-subject weights
        gain = FINE_BASE_WEIGHT + cfg.signal_strength * FINE_AGE_SLOPE * a_norm
        for c in fine_comps:
            mixing[c, fine_voxels[c]] *= gain
        signal = tc.T @ mixing  # (T, V)
        noise = rng.standard_normal((t, n_vox)) * cfg.noise_sigma
        volume = (signal + noise).astype(np.float32).reshape(t, *grid)

        sid = f"sub-{s + 1:04d}"
        fname = f"{sid}.bvol"
        write_bvol(os.path.join(out_dir, fname), volume)
        records.append(SubjectRecord(sid, float(ages[s]), fname))

    manifest = CohortManifest(records=records, seed=cfg.seed)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)

    meta = {
        "config": asdict(cfg),
        "blob_sigma": BLOB_SIGMA,
        "support_cutoff": SUPPORT_CUTOFF,
        "fine_cutoff": FINE_CUTOFF,
        "fine_base_weight": FINE_BASE_WEIGHT,
        "fine_age_slope": FINE_AGE_SLOPE,
        "pair_base_corr": PAIR_BASE_CORR,
        "pair_age_slope": PAIR_AGE_SLOPE,
        "designated_pairs": [list(p) for p in pairs],
        "fine_components": fine_comps,
        "fine_voxels": {str(c): v.tolist() for c, v in fine_voxels.items()},
        "component_peak_base_weight": {
            str(c): flat_maps[c, fine_voxels[c]].tolist() for c in fine_comps
        },
        "ages": [float(a) for a in ages],
    }
    with open(os.path.join(out_dir, "synth_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
