"""Distributed precoding (MR, SLNR) and combining (MR, RZF), powers, normalization.

Everything here is local: the vectors an AP computes for a UE depend only on
that AP's own estimates of the UEs it serves, the AP's power shares, and the
noise power. Directions are normalized to expected (not instantaneous) power.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import STREAM_WARMUP, FrameConfig, substream
from .channel import (EstimateDraw, SpatialCorrelation, compute_psi, draw_channels,
                      mmse_estimate, receive_pilots)
from .linalg import hpd_solve, trace_prod


@dataclass(frozen=True)
class PowerAlloc:
    """Downlink per-(UE, AP) powers and uplink per-UE powers, in W."""

    rho: np.ndarray  # (K, L), positive exactly on served pairs
    p: np.ndarray    # (K,)

    @classmethod
    def equal_power(cls, cluster, frame: FrameConfig) -> "PowerAlloc":
        return cls(rho=allocate_power_dl(cluster, frame.ap_power),
                   p=allocate_power_ul(frame.ue_max_power, cluster.num_ues))


def allocate_power_dl(cluster, ap_power: float) -> np.ndarray:
    """Equal split of the AP power budget over the UEs the AP serves."""
    rho = np.zeros((cluster.num_ues, cluster.num_aps))
    for l, served in enumerate(cluster.serving):
        if served:
            rho[served, l] = ap_power / len(served)
    return rho


def allocate_power_ul(ue_max_power: float, num_ues: int) -> np.ndarray:
    """Full-power uplink transmission for every UE."""
    return np.full(num_ues, ue_max_power)


@dataclass(frozen=True)
class Precoders:
    """Power-carrying precoding vectors w[(k, l)] for served pairs, (B, N) each."""

    w: dict
    norm_sq: dict  # (k, l) -> E{||direction||^2} used in the normalization
    block_tag: int = 0


@dataclass(frozen=True)
class Combiners:
    """Receive combining vectors v[(k, l)] for served pairs, (B, N) each."""

    v: dict
    block_tag: int = 0


def precode_mr(est: EstimateDraw) -> dict:
    """Maximum-ratio directions: the conjugated channel estimate."""
    return {pair: np.conj(h) for pair, h in est.h_hat.items()}


def precode_slnr(est: EstimateDraw, alloc: PowerAlloc, cluster,
                 noise_power: float) -> dict:
    """Signal-to-leakage-and-noise directions, local to each AP.

    Per AP l and block, solves
        (sum_{i in D_l} rho_il conj(h_hat_il) h_hat_il^T + noise I) w = conj(h_hat_kl)
    for every served UE k. The sum runs over the AP's served UEs only.
    """
    if noise_power <= 0:
        raise ValueError("noise_power must be positive")
    out = {}
    for l, served in _per_ap(cluster, est):
        H = np.stack([est.h_hat[(i, l)] for i in served], axis=1)  # (B, S, N)
        a = np.einsum("s,bsn,bsm->bnm", alloc.rho[served, l], np.conj(H), H,
                      optimize=True)
        n = a.shape[-1]
        a[:, np.arange(n), np.arange(n)] += noise_power
        x = hpd_solve(a, np.conj(H).transpose(0, 2, 1))  # (B, N, S)
        for j, k in enumerate(served):
            out[(k, l)] = x[:, :, j]
    return out


def combine_mr(est: EstimateDraw) -> Combiners:
    """Matched-filter combiners: the channel estimate itself."""
    return Combiners(v=dict(est.h_hat), block_tag=est.block_tag)


def combine_rzf(est: EstimateDraw, p: np.ndarray, cluster,
                noise_power: float) -> Combiners:
    """Regularized zero-forcing combiners over the AP's served UEs only.

    v_kl = p_k (sum_{i in D_l} p_i h_hat_il h_hat_il^H + noise I)^-1 h_hat_kl.
    """
    if noise_power <= 0:
        raise ValueError("noise_power must be positive")
    out = {}
    for l, served in _per_ap(cluster, est):
        H = np.stack([est.h_hat[(i, l)] for i in served], axis=1)
        a = np.einsum("s,bsn,bsm->bnm", p[served], H, np.conj(H), optimize=True)
        n = a.shape[-1]
        a[:, np.arange(n), np.arange(n)] += noise_power
        x = hpd_solve(a, H.transpose(0, 2, 1))  # (B, N, S)
        for j, k in enumerate(served):
            out[(k, l)] = p[k] * x[:, :, j]
    return Combiners(v=out, block_tag=est.block_tag)


def _per_ap(cluster, est: EstimateDraw):
    for l, served in enumerate(cluster.serving):
        if not served:
            continue
        missing = [i for i in served if (i, l) not in est.h_hat]
        if missing:
            raise KeyError(f"AP {l} serves UEs {missing} but has no estimates for them")
        yield l, served


@dataclass(frozen=True)
class PrecoderNorms:
    """Frozen direction-power statistics E{||w_bar||^2} per served pair.

    var_of_mean carries the Monte-Carlo uncertainty of each statistic (zero
    for the closed-form route) so downstream power checks can account for it.
    """

    norm_sq: dict
    var_of_mean: dict
    blocks: int
    method: str  # "analytic" | "warmup"


def mr_precoder_norm_sq(corr: SpatialCorrelation, book, cluster,
                        frame: FrameConfig) -> PrecoderNorms:
    """Exact E{||h_hat||^2} = p_k tau_p tr(R Psi^-1 R) for MR directions."""
    psi = compute_psi(corr, book, frame)
    p = frame.pilot_powers(corr.num_ues)
    pilot_of = book.pilot_of
    norm_sq = {}
    for l, served in enumerate(cluster.serving):
        for k in served:
            t = int(pilot_of[k])
            x = hpd_solve(psi[t, l], corr.R[k, l])
            norm_sq[(k, l)] = float(p[k] * frame.tau_p * trace_prod(corr.R[k, l], x).real)
    return PrecoderNorms(norm_sq=norm_sq,
                         var_of_mean={pair: 0.0 for pair in norm_sq},
                         blocks=0, method="analytic")


def estimate_precoder_norm_sq(corr: SpatialCorrelation, book, cluster,
                              alloc: PowerAlloc, frame: FrameConfig, scheme: str,
                              num_blocks: int, seed: int,
                              block_batch: int = 1000) -> PrecoderNorms:
    """Warm-up Monte-Carlo estimate of E{||w_bar||^2}, then frozen.

    Runs on an independent substream so the statistic never shares blocks with
    the spectral-efficiency evaluation (sharing would bias the bound).
    """
    sums: dict = {}
    sums_sq: dict = {}
    done = 0
    batch_idx = 0
    while done < num_blocks:
        B = min(block_batch, num_blocks - done)
        rng = substream(seed, STREAM_WARMUP, batch_idx)
        draw = draw_channels(corr, rng, num_blocks=B, block_tag=batch_idx)
        obs = receive_pilots(draw, book, frame, corr, rng)
        est = mmse_estimate(obs, corr, cluster, frame)
        wbar = precode_mr(est) if scheme == "mr" else \
            precode_slnr(est, alloc, cluster, frame.noise_power)
        for pair, w in wbar.items():
            nsq = np.einsum("bn,bn->b", w, np.conj(w)).real
            sums[pair] = sums.get(pair, 0.0) + float(nsq.sum())
            sums_sq[pair] = sums_sq.get(pair, 0.0) + float((nsq ** 2).sum())
        done += B
        batch_idx += 1
    norm_sq = {pair: s / num_blocks for pair, s in sums.items()}
    var_of_mean = {
        pair: max(sums_sq[pair] / num_blocks - norm_sq[pair] ** 2, 0.0) / num_blocks
        for pair in sums
    }
    return PrecoderNorms(norm_sq=norm_sq, var_of_mean=var_of_mean,
                         blocks=num_blocks, method="warmup")


def normalize_precoders(wbar: dict, alloc: PowerAlloc, norms: PrecoderNorms,
                        block_tag: int = 0) -> Precoders:
    """Scale directions to carry their allocated power: w = sqrt(rho/E||.||^2) w_bar.

    With the equal split, the per-AP expected power sums to at most the AP
    budget. A zero direction statistic with non-zero allocated power is a
    degenerate channel model and raises.
    """
    w = {}
    for pair, direction in wbar.items():
        rho = alloc.rho[pair]
        if rho == 0:
            w[pair] = np.zeros_like(direction)
            continue
        nsq = norms.norm_sq[pair]
        if nsq <= 0:
            raise ValueError(f"direction power statistic is zero for pair {pair}")
        w[pair] = np.sqrt(rho / nsq) * direction
    return Precoders(w=w, norm_sq=dict(norms.norm_sq), block_tag=block_tag)
