"""AP/UE geometry on a wrap-around square and large-scale propagation gains."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import (NetworkConfig, PropagationModel, STREAM_PLACEMENT,
                     STREAM_SHADOWING, substream)


@dataclass(frozen=True)
class Placement:
    """Planar coordinates in [0, side)^2, one row per node."""

    ap_positions: np.ndarray  # (L, 2)
    ue_positions: np.ndarray  # (K, 2)


@dataclass(frozen=True)
class LargeScale:
    """Average channel gains (linear) and 3-D wrap-around distances (m)."""

    beta: np.ndarray       # (K, L)
    distances: np.ndarray  # (K, L), all >= ap_height_m


def place_network(cfg: NetworkConfig) -> Placement:
    """Drop APs and UEs i.i.d. uniform on the square; deterministic per seed."""
    rng = substream(cfg.rng_seed, STREAM_PLACEMENT)
    ap = rng.uniform(0.0, cfg.area_side_m, size=(cfg.num_aps, 2))
    ue = rng.uniform(0.0, cfg.area_side_m, size=(cfg.num_ues, 2))
    return Placement(ap_positions=ap, ue_positions=ue)


def wrap_distance(a, b, side: float, height: float) -> float:
    """3-D distance between two points on the torus, including the AP height.

    The planar part is the minimum over the 9 toroidal shifts of b by
    (-side, 0, +side) in each axis, so opposite edges of the square touch.
    """
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    best = math.inf
    for sx in (-side, 0.0, side):
        for sy in (-side, 0.0, side):
            d = math.hypot(ax - (bx + sx), ay - (by + sy))
            if d < best:
                best = d
    return math.hypot(best, height)


def torus_delta(points_a: np.ndarray, points_b: np.ndarray, side: float) -> np.ndarray:
    """Shortest displacement a - b on the torus, per pair: (n, m, 2).

    Equivalent to scanning the 9 shifts because the axes decouple.
    """
    d = points_a[:, None, :] - points_b[None, :, :]
    return d - side * np.round(d / side)


def large_scale_gains(placement: Placement, cfg: NetworkConfig,
                      model: PropagationModel | None = None) -> LargeScale:
    """Pathloss-plus-shadowing gains over wrap-around distances.

    beta[dB] = offset - exponent * log10(d_3d) + N(0, shadowing_std_db^2),
    shadowing i.i.d. across (UE, AP) pairs and drawn from its own substream.
    """
    model = model or PropagationModel()
    delta = torus_delta(placement.ue_positions, placement.ap_positions, cfg.area_side_m)
    planar = np.hypot(delta[..., 0], delta[..., 1])
    dist = np.hypot(planar, cfg.ap_height_m)
    beta_db = model.pathloss_offset_db - model.pathloss_exponent_db * np.log10(dist)
    if model.shadowing_std_db > 0:
        rng = substream(cfg.rng_seed, STREAM_SHADOWING)
        beta_db = beta_db + rng.normal(0.0, model.shadowing_std_db, size=dist.shape)
    return LargeScale(beta=10.0 ** (beta_db / 10.0), distances=dist)
