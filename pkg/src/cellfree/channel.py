"""Spatial correlation, correlated Rayleigh block draws, pilot reception, MMSE estimation.

Array layout conventions: K UEs, L APs, N antennas per AP, B coherence blocks
per batch. Channels are stored as h[b, k, l] in C^N; correlation matrices as
R[k, l] in C^(N x N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FrameConfig, NetworkConfig, PropagationModel
from .linalg import hermitian_sqrt, hpd_solve
from .topology import LargeScale, Placement, torus_delta


@dataclass(frozen=True)
class SpatialCorrelation:
    """Per-(UE, AP) spatial correlation matrices R and their principal roots.

    Each R[k, l] is Hermitian PSD with tr(R[k, l]) / N == beta[k, l]; the root
    satisfies sqrt_R @ sqrt_R^H == R and is what the block draws use.
    """

    R: np.ndarray       # (K, L, N, N) complex
    sqrt_R: np.ndarray  # (K, L, N, N) complex
    beta: np.ndarray    # (K, L) real

    @property
    def num_ues(self) -> int:
        return self.R.shape[0]

    @property
    def num_aps(self) -> int:
        return self.R.shape[1]

    @property
    def num_antennas(self) -> int:
        return self.R.shape[2]


@dataclass(frozen=True)
class ChannelDraw:
    """One batch of independent per-block channel realizations."""

    h: np.ndarray  # (B, K, L, N) complex
    block_tag: int = 0

    @property
    def num_blocks(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class PilotObservation:
    """Received pilot signals and their deterministic correlation matrices."""

    y: np.ndarray    # (B, tau_p, L, N) complex
    psi: np.ndarray  # (tau_p, L, N, N) complex, Hermitian positive definite
    block_tag: int = 0


@dataclass(frozen=True)
class EstimateDraw:
    """MMSE channel estimates, computed only for served (UE, AP) pairs."""

    h_hat: dict  # (k, l) -> (B, N) complex
    block_tag: int = 0

    def per_ap_counts(self, num_aps: int) -> np.ndarray:
        counts = np.zeros(num_aps, dtype=int)
        for (_, l) in self.h_hat:
            counts[l] += 1
        return counts


def _pilot_sets(pilots) -> list[list[int]]:
    """Accept a PilotBook or a plain per-pilot list of UE index lists."""
    return pilots.assignments if hasattr(pilots, "assignments") else pilots


_GH_ORDER = 80  # Gauss-Hermite nodes; exact to quadrature accuracy for N <= 8


def local_scattering_correlation(num_antennas: int, angle_rad: float, asd_rad: float,
                                 spacing: float = 0.5) -> np.ndarray:
    """Unit-diagonal ULA correlation for a Gaussian angular spread.

    Entry (m, q) is E{exp(j 2 pi spacing (m - q) sin(angle + delta))} with
    delta ~ N(0, asd^2), evaluated by Gauss-Hermite quadrature of the exact
    integral (no small-spread approximation).
    """
    rows = _scattering_rows(np.asarray(angle_rad, dtype=float).reshape(1),
                            asd_rad, num_antennas, spacing)[0]
    return _toeplitz_from_rows(rows[None, :])[0]


def _scattering_rows(angles: np.ndarray, asd_rad: float, num_antennas: int,
                     spacing: float) -> np.ndarray:
    """First Toeplitz row a_m = E{exp(j 2 pi spacing m sin(angle + delta))}."""
    nodes, weights = np.polynomial.hermite.hermgauss(_GH_ORDER)
    weights = weights / np.sqrt(np.pi)
    shifted = np.sin(angles[..., None] + np.sqrt(2.0) * asd_rad * nodes)  # (..., Q)
    rows = np.empty(angles.shape + (num_antennas,), dtype=complex)
    rows[..., 0] = 1.0
    for m in range(1, num_antennas):
        rows[..., m] = np.exp(2j * np.pi * spacing * m * shifted) @ weights
    return rows


def _toeplitz_from_rows(rows: np.ndarray) -> np.ndarray:
    """Hermitian Toeplitz matrices from first rows a_0..a_{n-1} (a_{-m} = conj a_m)."""
    n = rows.shape[-1]
    ext = np.concatenate([np.conj(rows[..., :0:-1]), rows], axis=-1)  # lags -(n-1)..n-1
    idx = np.arange(n)[:, None] - np.arange(n)[None, :] + n - 1
    return ext[..., idx]


def build_correlation(large_scale: LargeScale, placement: Placement, cfg: NetworkConfig,
                      model: PropagationModel | None = None) -> SpatialCorrelation:
    """Assemble R[k, l] = beta[k, l] * Sigma(angle_kl) and its matrix roots.

    The nominal azimuth of each pair is taken from the same toroidal image of
    the AP that realizes the wrap-around distance. Raises ValueError if any
    assembled matrix fails the PSD tolerance (a model bug, not a data issue).
    """
    model = model or PropagationModel()
    n = cfg.antennas_per_ap
    beta = large_scale.beta
    if n == 1:
        R = beta[..., None, None].astype(complex)
        return SpatialCorrelation(R=R, sqrt_R=np.sqrt(R), beta=beta)
    delta = torus_delta(placement.ue_positions, placement.ap_positions, cfg.area_side_m)
    angles = np.arctan2(delta[..., 1], delta[..., 0])  # AP -> UE azimuth, (K, L)
    rows = _scattering_rows(angles, np.deg2rad(model.asd_deg), n, model.antenna_spacing)
    sigma = _toeplitz_from_rows(rows)
    R = beta[..., None, None] * sigma
    try:
        sqrt_R = hermitian_sqrt(R)
    except ValueError as exc:
        raise ValueError(f"correlation model produced a non-PSD matrix: {exc}") from exc
    return SpatialCorrelation(R=R, sqrt_R=sqrt_R, beta=beta)


def draw_channels(corr: SpatialCorrelation, rng: np.random.Generator,
                  num_blocks: int = 1, block_tag: int = 0) -> ChannelDraw:
    """Draw h[b, k, l] = sqrt_R[k, l] @ g with g standard complex Gaussian.

    Draws are independent across pairs and across blocks; the sample covariance
    over many blocks converges to R[k, l].
    """
    K, L, N = corr.num_ues, corr.num_aps, corr.num_antennas
    raw = rng.standard_normal((num_blocks, K, L, N, 2))
    g = np.sqrt(0.5) * (raw[..., 0] + 1j * raw[..., 1])
    h = np.einsum("klmn,bkln->bklm", corr.sqrt_R, g, optimize=True)
    return ChannelDraw(h=h, block_tag=block_tag)


def compute_psi(corr: SpatialCorrelation, pilots, frame: FrameConfig) -> np.ndarray:
    """Pilot-signal correlation matrices, one per (pilot, AP).

    psi[t, l] = sum over every UE i assigned to pilot t (served or not) of
    tau_p p_i R[i, l], plus noise_power * I.
    """
    assignments = _pilot_sets(pilots)
    K, L, N = corr.num_ues, corr.num_aps, corr.num_antennas
    p = frame.pilot_powers(K)
    psi = np.zeros((len(assignments), L, N, N), dtype=complex)
    psi[..., np.arange(N), np.arange(N)] = frame.noise_power
    for t, ues in enumerate(assignments):
        for i in ues:
            psi[t] += frame.tau_p * p[i] * corr.R[i]
    return psi


def receive_pilots(draw: ChannelDraw, pilots, frame: FrameConfig,
                   corr: SpatialCorrelation, rng: np.random.Generator) -> PilotObservation:
    """Form the received pilot signals with fresh noise for every block.

    y[b, t, l] = sum_{i on pilot t} sqrt(tau_p p_i) h[b, i, l] + n, with
    n ~ CN(0, noise_power I). The psi matrices are deterministic and do not
    depend on the realizations.
    """
    assignments = _pilot_sets(pilots)
    B, K, L, N = draw.h.shape
    p = frame.pilot_powers(K)
    tau_p = len(assignments)
    raw = rng.standard_normal((B, tau_p, L, N, 2))
    y = np.sqrt(frame.noise_power / 2.0) * (raw[..., 0] + 1j * raw[..., 1])
    for t, ues in enumerate(assignments):
        for i in ues:
            y[:, t] += np.sqrt(frame.tau_p * p[i]) * draw.h[:, i]
    psi = compute_psi(corr, assignments, frame)
    return PilotObservation(y=y, psi=psi, block_tag=draw.block_tag)


def mmse_estimate(obs: PilotObservation, corr: SpatialCorrelation, cluster,
                  frame: FrameConfig) -> EstimateDraw:
    """MMSE estimates h_hat = sqrt(p_k tau_p) R Psi^-1 y for served pairs only.

    Each AP estimates exactly the UEs in its serving set (at most one per
    pilot), so the per-AP work is bounded by tau_p regardless of K. Each
    estimate is distributed CN(0, p_k tau_p R Psi^-1 R).
    """
    K = corr.num_ues
    p = frame.pilot_powers(K)
    h_hat: dict = {}
    for l in range(corr.num_aps):
        for t in sorted(cluster.slot[l]):
            k = cluster.slot[l][t]
            try:
                x = hpd_solve(obs.psi[t, l], corr.R[k, l])  # Psi^-1 R
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    "pilot correlation matrix is singular; noise_power must be > 0"
                ) from exc
            gain = np.sqrt(p[k] * frame.tau_p) * np.conj(x).T  # R Psi^-1
            h_hat[(k, l)] = obs.y[:, t, l] @ gain.T
    return EstimateDraw(h_hat=h_hat, block_tag=obs.block_tag)
