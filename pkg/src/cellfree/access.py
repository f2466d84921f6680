"""Distributed initial access: master appointment, pilot assignment, cluster formation.

UEs are admitted one at a time. Each UE appoints the AP with the strongest
average gain as its master, gets the quietest pilot at that master, and is then
offered to a limited neighbor set. Every AP serves at most one UE per pilot,
so its serving set never exceeds tau_p UEs no matter how many UEs exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import FrameConfig, NeighborParams
from .topology import LargeScale


class MasterCapacityError(RuntimeError):
    """Raised when a master AP has no pilot left that it is not already
    master-serving; fallback multiplexing is intentionally not modeled."""


@dataclass
class PilotBook:
    """Pilot assignments: per-pilot UE lists and the per-UE pilot index."""

    assignments: list  # tau_p lists of UE indices
    pilot_of: np.ndarray  # (K,) int, -1 while unassigned

    @classmethod
    def empty(cls, tau_p: int, num_ues: int) -> "PilotBook":
        return cls(assignments=[[] for _ in range(tau_p)],
                   pilot_of=np.full(num_ues, -1, dtype=int))


@dataclass
class ClusterState:
    """Serving relations: D_l per AP, M(k) per UE, master map, pilot slots.

    Invariants (checked by assert_consistent): k in serving[l] iff
    l in ue_aps[k]; each AP holds at most one UE per pilot; every assigned UE
    has its master inside its own cluster.
    """

    serving: list            # per AP: list of served UE indices
    ue_aps: list             # per UE: list of serving AP indices
    master: np.ndarray       # (K,) int, -1 while unassigned
    slot: list               # per AP: {pilot -> UE}

    @classmethod
    def empty(cls, num_aps: int, num_ues: int) -> "ClusterState":
        return cls(serving=[[] for _ in range(num_aps)],
                   ue_aps=[[] for _ in range(num_ues)],
                   master=np.full(num_ues, -1, dtype=int),
                   slot=[{} for _ in range(num_aps)])

    @property
    def num_aps(self) -> int:
        return len(self.serving)

    @property
    def num_ues(self) -> int:
        return len(self.ue_aps)

    def serves(self, ap: int, ue: int) -> bool:
        return ue in self.serving[ap]

    def serve_mask(self) -> np.ndarray:
        """(K, L) boolean membership matrix (the block-diagonal selection
        matrices are never materialized)."""
        mask = np.zeros((self.num_ues, self.num_aps), dtype=bool)
        for l, ues in enumerate(self.serving):
            mask[ues, l] = True
        return mask

    def _adopt(self, ap: int, ue: int, pilot: int):
        self.slot[ap][pilot] = ue
        self.serving[ap].append(ue)
        self.ue_aps[ue].append(ap)

    def _drop(self, ap: int, ue: int, pilot: int):
        del self.slot[ap][pilot]
        self.serving[ap].remove(ue)
        self.ue_aps[ue].remove(ap)

    def assert_consistent(self, tau_p: int | None = None):
        for l, ues in enumerate(self.serving):
            if len(set(ues)) != len(ues):
                raise AssertionError(f"AP {l} lists a UE twice")
            if tau_p is not None and len(ues) > tau_p:
                raise AssertionError(f"AP {l} serves {len(ues)} > tau_p UEs")
            if sorted(self.slot[l].values()) != sorted(ues):
                raise AssertionError(f"AP {l} slot map disagrees with serving set")
            for k in ues:
                if l not in self.ue_aps[k]:
                    raise AssertionError(f"serving[{l}] and ue_aps[{k}] disagree")
        for k, aps in enumerate(self.ue_aps):
            for l in aps:
                if k not in self.serving[l]:
                    raise AssertionError(f"ue_aps[{k}] and serving[{l}] disagree")
            if self.master[k] >= 0 and self.master[k] not in aps:
                raise AssertionError(f"UE {k} is not served by its master AP")


@dataclass(frozen=True)
class AdmissionSummary:
    """Bookkeeping emitted for the harness: cluster sizes, loads, messages."""

    cluster_size: np.ndarray        # (K,) int
    notified_neighbors: np.ndarray  # (K,) int, step-3 notifications per UE
    displaced: list                 # (ue, ap, by_ue) events in admission order
    ap_load: np.ndarray             # (L,) int, |D_l|
    ap_mastered: np.ndarray         # (L,) int, UEs mastered per AP


@dataclass(frozen=True)
class AdmissionResult:
    book: PilotBook
    cluster: ClusterState
    summary: AdmissionSummary


def appoint_master(ue: int, large_scale: LargeScale) -> int:
    """AP with the largest average gain to the UE; ties go to the lowest index."""
    return int(np.argmax(large_scale.beta[ue]))


def assign_pilot(master_ap: int, corr, book: PilotBook, cluster: ClusterState,
                 frame: FrameConfig, ue: int) -> int:
    """Pick the pilot the master AP observes the least pilot power on.

    The received pilot power statistic is tr(psi) at the master, computed from
    the current global pilot sets; with unit-diagonal correlation shapes this
    reduces to N * (noise + tau_p * sum of p_i beta_il). Pilots on which the
    master already master-serves a UE are excluded (that role has priority).
    The UE is appended to the winning pilot set.
    """
    tau_p = len(book.assignments)
    beta_l = corr.beta[:, master_ap]
    p = frame.pilot_powers(len(beta_l))
    n = corr.num_antennas
    blocked = {t for t, k in cluster.slot[master_ap].items()
               if cluster.master[k] == master_ap}
    best_t, best_trace = -1, np.inf
    for t in range(tau_p):
        if t in blocked:
            continue
        trace = n * (frame.noise_power
                     + frame.tau_p * sum(p[i] * beta_l[i] for i in book.assignments[t]))
        if trace < best_trace:
            best_t, best_trace = t, trace
    if best_t < 0:
        raise MasterCapacityError(
            f"master capacity exhausted: AP {master_ap} already master-serves "
            f"a UE on all {tau_p} pilots")
    book.assignments[best_t].append(ue)
    book.pilot_of[ue] = best_t
    return best_t


def form_cluster(ue: int, pilot: int, master_ap: int, large_scale: LargeScale,
                 cluster: ClusterState, neighbors: NeighborParams):
    """Master adopts unconditionally; notified neighbors adopt by the local rule.

    A neighbor AP takes the UE onto the pilot slot iff the slot is free, or the
    new UE has a larger average gain than the incumbent *and* the AP is not the
    incumbent's master. Displaced UEs lose only this AP; they keep their own
    master. Returns (notified_count, displaced_events).
    """
    beta_k = large_scale.beta[ue]
    displaced = []

    incumbent = cluster.slot[master_ap].get(pilot)
    if incumbent is not None and incumbent != ue:
        cluster._drop(master_ap, incumbent, pilot)
        displaced.append((incumbent, master_ap, ue))
    if not cluster.serves(master_ap, ue):
        cluster._adopt(master_ap, ue, pilot)
    cluster.master[ue] = master_ap

    floor = beta_k[master_ap] * 10.0 ** (-neighbors.delta_db / 10.0)
    candidates = [l for l in np.argsort(-beta_k, kind="stable")
                  if l != master_ap and beta_k[l] >= floor]
    candidates = candidates[:neighbors.max_neighbors]
    for l in candidates:
        incumbent = cluster.slot[l].get(pilot)
        if incumbent is None:
            cluster._adopt(int(l), ue, pilot)
        elif beta_k[l] > large_scale.beta[incumbent, l] and cluster.master[incumbent] != l:
            cluster._drop(int(l), incumbent, pilot)
            displaced.append((incumbent, int(l), ue))
            cluster._adopt(int(l), ue, pilot)
    return len(candidates), displaced


def admit_all(order, corr, large_scale: LargeScale, frame: FrameConfig,
              neighbors: NeighborParams | None = None) -> AdmissionResult:
    """Admit UEs sequentially: appoint master, assign pilot, form cluster.

    `order` is the arrival order (default 0..K-1). Raises MasterCapacityError
    if some arrival cannot be given a pilot. On success every UE has a master
    inside a non-empty cluster and all ClusterState invariants hold.
    """
    neighbors = neighbors or NeighborParams()
    K, L = large_scale.beta.shape
    order = list(range(K)) if order is None else [int(u) for u in order]
    book = PilotBook.empty(frame.tau_p, K)
    cluster = ClusterState.empty(L, K)
    notified = np.zeros(K, dtype=int)
    displaced_events = []
    for ue in order:
        master_ap = appoint_master(ue, large_scale)
        pilot = assign_pilot(master_ap, corr, book, cluster, frame, ue)
        count, displaced = form_cluster(ue, pilot, master_ap, large_scale,
                                        cluster, neighbors)
        notified[ue] = count
        displaced_events.extend(displaced)
    cluster.assert_consistent(frame.tau_p)
    if np.any(cluster.master < 0):
        raise AssertionError("some UE finished admission without a master AP")
    summary = AdmissionSummary(
        cluster_size=np.array([len(v) for v in cluster.ue_aps]),
        notified_neighbors=notified,
        displaced=displaced_events,
        ap_load=np.array([len(v) for v in cluster.serving]),
        ap_mastered=np.bincount(cluster.master, minlength=L),
    )
    return AdmissionResult(book=book, cluster=cluster, summary=summary)
