"""Spectral-efficiency evaluation: Monte-Carlo bounds, MR closed form, genie references.

Downlink uses the hardening bound (only the mean effective channel is treated
as known at the UE); uplink uses the use-and-then-forget bound of the same
family. Both are assembled from per-UE moment accumulators that merge
associatively, so blocks can be evaluated in any batching and combined.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import STREAM_EVAL, FrameConfig, substream
from .channel import (ChannelDraw, EstimateDraw, SpatialCorrelation, compute_psi,
                      draw_channels, mmse_estimate, receive_pilots)
from .beamforming import (Combiners, PowerAlloc, Precoders, PrecoderNorms,
                          combine_mr, combine_rzf, mr_precoder_norm_sq,
                          normalize_precoders, precode_mr, precode_slnr)
from .linalg import hpd_solve, trace_prod

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class SEReport:
    """Per-UE spectral efficiencies with scheme/bound provenance.

    se is in bit/s/Hz and already includes the frame prelog; stderr is the
    Monte-Carlo standard error of se (zeros for closed-form results).
    """

    link: str    # "dl" | "ul"
    scheme: str  # "mr" | "slnr" | "rzf"
    bound: str   # "hardening" | "use-and-forget" | "closed-form" | "genie"
    se: np.ndarray
    stderr: np.ndarray
    blocks: int


def effective_gains_dl(draw: ChannelDraw, prec: Precoders, cluster) -> np.ndarray:
    """z[b, k, i] = sum over APs serving UE i of h[b, k, l]^T w[b, i, l]."""
    B, K = draw.h.shape[0], draw.h.shape[1]
    z = np.zeros((B, K, K), dtype=complex)
    for i in range(K):
        aps = cluster.ue_aps[i]
        if not aps:
            continue
        w = np.stack([prec.w[(i, l)] for l in aps], axis=1)       # (B, M, N)
        hi = draw.h[:, :, aps, :]                                  # (B, K, M, N)
        z[:, :, i] = (hi.reshape(B, K, -1) @ w.reshape(B, -1, 1))[..., 0]
    return z


def effective_gains_ul(draw: ChannelDraw, comb: Combiners, cluster) -> np.ndarray:
    """z[b, k, i] = sum over APs serving UE k of v[b, k, l]^H h[b, i, l]."""
    B, K = draw.h.shape[0], draw.h.shape[1]
    z = np.zeros((B, K, K), dtype=complex)
    for k in range(K):
        aps = cluster.ue_aps[k]
        if not aps:
            continue
        v = np.stack([comb.v[(k, l)] for l in aps], axis=1)        # (B, M, N)
        hk = draw.h[:, :, aps, :]                                  # (B, i, M, N)
        z[:, k, :] = (hk.reshape(B, K, -1) @ np.conj(v).reshape(B, -1, 1))[..., 0]
    return z


def combiner_noise_quad(comb: Combiners, cluster, num_blocks: int) -> np.ndarray:
    """q[b, k] = sum over serving APs of ||v[b, k, l]||^2 (uplink noise term)."""
    K = len(cluster.ue_aps)
    q = np.zeros((num_blocks, K))
    for k in range(K):
        for l in cluster.ue_aps[k]:
            v = comb.v[(k, l)]
            q[:, k] += np.einsum("bn,bn->b", v, np.conj(v)).real
    return q


@dataclass
class MomentAccumulator:
    """Mergeable running sums of every expectation in the two SE bounds.

    Tracks first and second sample moments of the effective gains (and their
    squares, for delta-method standard errors), plus the uplink combiner noise
    quadratic. Merging adds the sums, so the final SE is independent of how
    blocks were batched up to floating-point reassociation.
    """

    link: str
    scheme: str
    sig: np.ndarray        # (K,) complex, sum of z_kk
    sig_re2: np.ndarray    # (K,)
    sig_im2: np.ndarray
    sig_cross: np.ndarray
    intf: np.ndarray       # (K, K), sum of |z_ki|^2
    intf_sq: np.ndarray    # (K, K), sum of |z_ki|^4
    noise_quad: np.ndarray     # (K,), uplink only
    noise_quad_sq: np.ndarray  # (K,)
    blocks: int = 0

    @classmethod
    def empty(cls, num_ues: int, link: str, scheme: str) -> "MomentAccumulator":
        if link not in ("dl", "ul"):
            raise ValueError("link must be 'dl' or 'ul'")
        K = num_ues
        return cls(link=link, scheme=scheme,
                   sig=np.zeros(K, dtype=complex), sig_re2=np.zeros(K),
                   sig_im2=np.zeros(K), sig_cross=np.zeros(K),
                   intf=np.zeros((K, K)), intf_sq=np.zeros((K, K)),
                   noise_quad=np.zeros(K), noise_quad_sq=np.zeros(K))

    def add_gains(self, z: np.ndarray, noise_quad: np.ndarray | None = None):
        if self.link == "ul" and noise_quad is None:
            raise ValueError("uplink accumulation requires the combiner noise term")
        zd = np.einsum("bkk->bk", z)
        self.sig += zd.sum(axis=0)
        self.sig_re2 += (zd.real ** 2).sum(axis=0)
        self.sig_im2 += (zd.imag ** 2).sum(axis=0)
        self.sig_cross += (zd.real * zd.imag).sum(axis=0)
        a2 = np.abs(z) ** 2
        self.intf += a2.sum(axis=0)
        self.intf_sq += (a2 * a2).sum(axis=0)
        if noise_quad is not None:
            self.noise_quad += noise_quad.sum(axis=0)
            self.noise_quad_sq += (noise_quad ** 2).sum(axis=0)
        self.blocks += z.shape[0]

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if (self.link, self.scheme, self.sig.shape) != (other.link, other.scheme, other.sig.shape):
            raise ValueError("cannot merge accumulators of different runs")
        out = MomentAccumulator.empty(self.sig.shape[0], self.link, self.scheme)
        for name in ("sig", "sig_re2", "sig_im2", "sig_cross", "intf", "intf_sq",
                     "noise_quad", "noise_quad_sq"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.blocks = self.blocks + other.blocks
        return out


def accumulate_block(draw: ChannelDraw, est: EstimateDraw, prec: Precoders | None,
                     comb: Combiners | None, cluster,
                     acc: MomentAccumulator) -> MomentAccumulator:
    """Fold one batch of consistent per-block artifacts into the accumulator.

    All artifacts must come from the same batch (same block_tag); mixing draws
    and precoders from different batches is a hard error, not a warning.
    """
    parts = [p for p in (est, prec, comb) if p is not None]
    if any(p.block_tag != draw.block_tag for p in parts):
        raise ValueError("mismatched block provenance: draw/estimate/vector tags differ")
    if acc.link == "dl":
        if prec is None:
            raise ValueError("downlink accumulation requires precoders")
        acc.add_gains(effective_gains_dl(draw, prec, cluster))
    else:
        if comb is None:
            raise ValueError("uplink accumulation requires combiners")
        z = effective_gains_ul(draw, comb, cluster)
        acc.add_gains(z, combiner_noise_quad(comb, cluster, draw.num_blocks))
    return acc


def _signal_stats(acc: MomentAccumulator):
    B = acc.blocks
    m = acc.sig / B
    var_re = np.maximum(acc.sig_re2 / B - m.real ** 2, 0.0) / B
    var_im = np.maximum(acc.sig_im2 / B - m.imag ** 2, 0.0) / B
    cov = (acc.sig_cross / B - m.real * m.imag) / B
    var_s = 4.0 * (m.real ** 2 * var_re + m.imag ** 2 * var_im
                   + 2.0 * m.real * m.imag * cov)
    return m, np.maximum(var_s, 0.0)


def _clamped_self_var(diff: np.ndarray, link: str) -> tuple[np.ndarray, np.ndarray]:
    clamped = diff < 0
    if np.any(clamped):
        log.warning("%s variance term negative for %d UE(s); clamped to zero "
                    "(finite-sample artifact)", link, int(clamped.sum()))
    return np.maximum(diff, 0.0), ~clamped


def finalize_se_dl(acc: MomentAccumulator, frame: FrameConfig) -> SEReport:
    """Hardening-bound downlink SE with delta-method standard errors.

    SINR_k = |E z_kk|^2 / (sum_i E|z_ki|^2 - |E z_kk|^2 + noise). The variance
    term is clamped at zero if Monte-Carlo noise drives it negative. Standard
    errors propagate the variances of the accumulated moments (cross-moment
    covariances are not tracked; empirically this errs conservative).
    """
    if acc.blocks < 1:
        raise ValueError("cannot finalize an empty accumulator")
    B = acc.blocks
    m, var_s = _signal_stats(acc)
    s = np.abs(m) ** 2
    t = acc.intf / B
    t_diag = np.einsum("kk->k", t)
    self_var, unclamped = _clamped_self_var(t_diag - s, "downlink")
    denom = self_var + (t.sum(axis=1) - t_diag) + frame.noise_power
    sinr = s / denom
    prelog = frame.tau_d / frame.tau_c

    var_t = np.maximum(acc.intf_sq / B - t ** 2, 0.0) / B
    d_s = 1.0 / denom + (s / denom ** 2) * unclamped
    d_t = -s / denom ** 2
    var_sinr = d_s ** 2 * var_s + d_t ** 2 * (var_t.sum(axis=1)
                                              - np.einsum("kk->k", var_t) * (~unclamped))
    stderr = prelog * np.sqrt(var_sinr) / ((1.0 + sinr) * LN2)
    return SEReport(link="dl", scheme=acc.scheme, bound="hardening",
                    se=prelog * np.log2(1.0 + sinr), stderr=stderr, blocks=B)


def finalize_se_ul(acc: MomentAccumulator, frame: FrameConfig,
                   p: np.ndarray) -> SEReport:
    """Use-and-forget uplink SE with delta-method standard errors.

    SINR_k = p_k |E z_kk|^2 / (sum_i p_i E|z_ki|^2 - p_k |E z_kk|^2
    + noise * E{sum_l ||v_kl||^2}).
    """
    if acc.blocks < 1:
        raise ValueError("cannot finalize an empty accumulator")
    B = acc.blocks
    m, var_s = _signal_stats(acc)
    s = np.abs(m) ** 2
    t = acc.intf / B
    t_diag = np.einsum("kk->k", t)
    q = acc.noise_quad / B
    self_var, unclamped = _clamped_self_var(t_diag - s, "uplink")
    denom = p * self_var + (t @ p - p * t_diag) + frame.noise_power * q
    sinr = p * s / denom
    prelog = frame.tau_u / frame.tau_c

    var_t = np.maximum(acc.intf_sq / B - t ** 2, 0.0) / B
    var_q = np.maximum(acc.noise_quad_sq / B - q ** 2, 0.0) / B
    d_s = p / denom + (p * s * p / denom ** 2) * unclamped
    scale = p * s / denom ** 2
    var_interf = (var_t * (p[None, :] ** 2)).sum(axis=1) \
        - np.einsum("kk->k", var_t) * p ** 2 * (~unclamped)
    var_sinr = d_s ** 2 * var_s + scale ** 2 * var_interf \
        + (scale * frame.noise_power) ** 2 * var_q
    stderr = prelog * np.sqrt(var_sinr) / ((1.0 + sinr) * LN2)
    return SEReport(link="ul", scheme=acc.scheme, bound="use-and-forget",
                    se=prelog * np.log2(1.0 + sinr), stderr=stderr, blocks=B)


@dataclass(frozen=True)
class ClosedFormResult:
    """MR downlink closed form: the report plus the individual terms.

    signal_amp[k] is the (real, non-negative) mean effective channel;
    interference[k, i] is E{|z_ki|^2} including the coherent pilot-sharing
    addend when UEs k and i share a pilot.
    """

    report: SEReport
    signal_amp: np.ndarray    # (K,)
    interference: np.ndarray  # (K, K)


def closed_form_mr_dl(corr: SpatialCorrelation, book, cluster, alloc: PowerAlloc,
                      frame: FrameConfig) -> ClosedFormResult:
    """Deterministic evaluation of the MR hardening-bound SE.

    Valid for MR precoding on MMSE estimates with expected-power normalization;
    no randomness is involved. The signal coefficient uses the served UE's own
    power share rho_kl.
    """
    K = corr.num_ues
    psi = compute_psi(corr, book, frame)
    p = frame.pilot_powers(K)
    pilot_of = book.pilot_of

    x = {}       # (i, l) -> Psi^-1 R_il
    t_norm = {}  # (i, l) -> tr(R Psi^-1 R), the MR direction power / (p_i tau_p)
    for i in range(K):
        t_i = int(pilot_of[i])
        for l in cluster.ue_aps[i]:
            x[(i, l)] = hpd_solve(psi[t_i, l], corr.R[i, l])
            t_norm[(i, l)] = trace_prod(corr.R[i, l], x[(i, l)]).real

    signal_amp = np.zeros(K)
    for k in range(K):
        signal_amp[k] = sum(
            math.sqrt(alloc.rho[k, l] * p[k] * frame.tau_p * t_norm[(k, l)])
            for l in cluster.ue_aps[k])

    interference = np.zeros((K, K))
    for i in range(K):
        for k in range(K):
            noncoh = 0.0
            coh = 0.0 + 0.0j
            for l in cluster.ue_aps[i]:
                c_il = corr.R[i, l] @ x[(i, l)]  # R Psi^-1 R
                noncoh += alloc.rho[i, l] * trace_prod(c_il, corr.R[k, l]).real \
                    / t_norm[(i, l)]
                if pilot_of[i] == pilot_of[k]:
                    coh += math.sqrt(alloc.rho[i, l] * p[k] * frame.tau_p) \
                        * trace_prod(x[(i, l)], corr.R[k, l]) \
                        / math.sqrt(t_norm[(i, l)])
            interference[k, i] = noncoh + abs(coh) ** 2

    denom = interference.sum(axis=1) - signal_amp ** 2 + frame.noise_power
    sinr = signal_amp ** 2 / denom
    prelog = frame.tau_d / frame.tau_c
    report = SEReport(link="dl", scheme="mr", bound="closed-form",
                      se=prelog * np.log2(1.0 + sinr),
                      stderr=np.zeros(K), blocks=0)
    return ClosedFormResult(report=report, signal_amp=signal_amp,
                            interference=interference)


@dataclass
class GenieAccumulator:
    """Running mean/variance of the per-block instantaneous rate log2(1+SINR).

    The genie reference assumes perfect CSI on the receive side of the bound:
    downlink SINR uses the instantaneous interference of each block, uplink
    uses the instantaneous combined SINR.
    """

    link: str
    scheme: str
    noise_power: float
    p: np.ndarray | None = None  # uplink powers, required for link == "ul"
    rate_sum: np.ndarray | None = None
    rate_sq_sum: np.ndarray | None = None
    blocks: int = 0

    def add(self, z: np.ndarray, noise_quad: np.ndarray | None = None):
        a2 = np.abs(z) ** 2
        diag = np.einsum("bkk->bk", a2)
        if self.link == "dl":
            sinr = diag / (a2.sum(axis=2) - diag + self.noise_power)
        else:
            if noise_quad is None:
                raise ValueError("uplink genie requires the combiner noise term")
            interf = a2 @ self.p - self.p[None, :] * diag
            sinr = self.p[None, :] * diag / (interf + self.noise_power * noise_quad)
        rate = np.log2(1.0 + sinr)
        if self.rate_sum is None:
            self.rate_sum = np.zeros(rate.shape[1])
            self.rate_sq_sum = np.zeros(rate.shape[1])
        self.rate_sum += rate.sum(axis=0)
        self.rate_sq_sum += (rate ** 2).sum(axis=0)
        self.blocks += rate.shape[0]

    def finalize(self, frame: FrameConfig) -> SEReport:
        if self.blocks < 1:
            raise ValueError("cannot finalize an empty accumulator")
        prelog = (frame.tau_d if self.link == "dl" else frame.tau_u) / frame.tau_c
        mean = self.rate_sum / self.blocks
        var = np.maximum(self.rate_sq_sum / self.blocks - mean ** 2, 0.0) / self.blocks
        return SEReport(link=self.link, scheme=self.scheme, bound="genie",
                        se=prelog * mean, stderr=prelog * np.sqrt(var),
                        blocks=self.blocks)


@dataclass(frozen=True)
class SchemeEvaluation:
    """Everything one Monte-Carlo pass produces for a (dl, ul) scheme pair."""

    dl: SEReport | None
    ul: SEReport | None
    dl_genie: SEReport | None
    ul_genie: SEReport | None
    acc_dl: MomentAccumulator | None
    acc_ul: MomentAccumulator | None
    dl_norms: PrecoderNorms | None
    ap_power_mean: np.ndarray | None      # (L,) average transmitted power per AP
    ap_power_var_of_mean: np.ndarray | None
    blocks: int


def evaluate_schemes(corr: SpatialCorrelation, book, cluster, alloc: PowerAlloc,
                     frame: FrameConfig, *, dl_scheme: str | None = None,
                     ul_scheme: str | None = None, num_blocks: int, seed: int,
                     block_batch: int = 1000, dl_norms: PrecoderNorms | None = None,
                     frame_ul: FrameConfig | None = None,
                     include_genie: bool = True) -> SchemeEvaluation:
    """Monte-Carlo SE evaluation of one downlink and/or one uplink scheme.

    Draws, pilot reception, estimation, precoding/combining and accumulation
    run batch by batch on substreams keyed by the batch index, so results are
    deterministic for a fixed (seed, block_batch) and blocks never leak between
    the warm-up normalization pass and this evaluation.
    """
    if dl_scheme is None and ul_scheme is None:
        raise ValueError("nothing to evaluate")
    if dl_scheme is not None and dl_norms is None:
        dl_norms = mr_precoder_norm_sq(corr, book, cluster, frame) \
            if dl_scheme == "mr" else None
        if dl_norms is None:
            raise ValueError(f"{dl_scheme} evaluation requires warm-up precoder norms")
    frame_ul = frame_ul or frame
    K, L = corr.num_ues, corr.num_aps

    acc_dl = MomentAccumulator.empty(K, "dl", dl_scheme) if dl_scheme else None
    acc_ul = MomentAccumulator.empty(K, "ul", ul_scheme) if ul_scheme else None
    genie_dl = GenieAccumulator("dl", dl_scheme, frame.noise_power) \
        if (dl_scheme and include_genie) else None
    genie_ul = GenieAccumulator("ul", ul_scheme, frame.noise_power, p=alloc.p) \
        if (ul_scheme and include_genie) else None
    power_sum = np.zeros(L)
    power_sq_sum = np.zeros(L)

    done = 0
    batch_idx = 0
    while done < num_blocks:
        B = min(block_batch, num_blocks - done)
        rng = substream(seed, STREAM_EVAL, batch_idx)
        draw = draw_channels(corr, rng, num_blocks=B, block_tag=batch_idx)
        obs = receive_pilots(draw, book, frame, corr, rng)
        est = mmse_estimate(obs, corr, cluster, frame)

        if dl_scheme:
            wbar = precode_mr(est) if dl_scheme == "mr" else \
                precode_slnr(est, alloc, cluster, frame.noise_power)
            prec = normalize_precoders(wbar, alloc, dl_norms, block_tag=draw.block_tag)
            z = effective_gains_dl(draw, prec, cluster)
            acc_dl.add_gains(z)
            if genie_dl is not None:
                genie_dl.add(z)
            for l, served in enumerate(cluster.serving):
                if not served:
                    continue
                pw = sum(np.einsum("bn,bn->b", prec.w[(k, l)],
                                   np.conj(prec.w[(k, l)])).real for k in served)
                power_sum[l] += pw.sum()
                power_sq_sum[l] += (pw ** 2).sum()

        if ul_scheme:
            comb = combine_mr(est) if ul_scheme == "mr" else \
                combine_rzf(est, alloc.p, cluster, frame.noise_power)
            zu = effective_gains_ul(draw, comb, cluster)
            q = combiner_noise_quad(comb, cluster, B)
            acc_ul.add_gains(zu, q)
            if genie_ul is not None:
                genie_ul.add(zu, q)

        done += B
        batch_idx += 1

    power_mean = power_sum / num_blocks if dl_scheme else None
    power_var = None
    if dl_scheme:
        power_var = np.maximum(power_sq_sum / num_blocks - power_mean ** 2, 0.0) \
            / num_blocks
    return SchemeEvaluation(
        dl=finalize_se_dl(acc_dl, frame) if dl_scheme else None,
        ul=finalize_se_ul(acc_ul, frame_ul, alloc.p) if ul_scheme else None,
        dl_genie=genie_dl.finalize(frame) if genie_dl is not None else None,
        ul_genie=genie_ul.finalize(frame_ul) if genie_ul is not None else None,
        acc_dl=acc_dl, acc_ul=acc_ul, dl_norms=dl_norms,
        ap_power_mean=power_mean, ap_power_var_of_mean=power_var,
        blocks=num_blocks)
