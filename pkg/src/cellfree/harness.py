"""Experiment orchestration: network drops, CDF experiments, gain histograms, selftest.

Outputs are flat files (CSV + JSON) with enough columns to regenerate every
figure-style result; nothing here renders plots. All outputs are byte-stable
for a fixed (seed, spec).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, replace
from itertools import zip_longest

import numpy as np
from scipy.integrate import quad

from .access import (AdmissionResult, ClusterState, MasterCapacityError, PilotBook,
                     admit_all)
from .beamforming import (PowerAlloc, PrecoderNorms, estimate_precoder_norm_sq,
                          mr_precoder_norm_sq, precode_mr, precode_slnr)
from .channel import EstimateDraw, SpatialCorrelation, build_correlation, draw_channels
from .config import (STREAM_DROP, STREAM_FIG2, ExperimentSpec, FrameConfig,
                     NeighborParams, NetworkConfig, PropagationModel, derive_seed,
                     spec_to_items, substream, validate_spec)
from .se import ClosedFormResult, SchemeEvaluation, SEReport, closed_form_mr_dl, \
    evaluate_schemes
from .topology import large_scale_gains, place_network

log = logging.getLogger(__name__)


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


def _write_csv(path: str, header: list, rows: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@dataclass(frozen=True)
class DropArtifacts:
    """Everything one network drop produces before SE evaluation."""

    network: NetworkConfig
    corr: SpatialCorrelation
    admission: AdmissionResult
    alloc: PowerAlloc


def prepare_drop(network: NetworkConfig, propagation: PropagationModel,
                 frame: FrameConfig, neighbors: NeighborParams | None = None,
                 order=None) -> DropArtifacts:
    """Place the network, build gains/correlations, admit every UE, allocate power."""
    placement = place_network(network)
    large = large_scale_gains(placement, network, propagation)
    corr = build_correlation(large, placement, network, propagation)
    admission = admit_all(order, corr, large, frame, neighbors)
    alloc = PowerAlloc.equal_power(admission.cluster, frame)
    return DropArtifacts(network=network, corr=corr, admission=admission, alloc=alloc)


@dataclass(frozen=True)
class DropResult:
    drop_id: int
    artifacts: DropArtifacts
    evaluations: dict      # (dl_scheme, ul_scheme) -> SchemeEvaluation
    closed_form: ClosedFormResult | None


@dataclass(frozen=True)
class ExperimentResult:
    summary: dict
    se_csv: str
    clusters_csv: str
    ap_load_csv: str
    summary_json: str
    drop_results: list


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run the configured number of independent drops and write CSV/JSON outputs.

    Per drop: place -> gains -> correlations -> admission -> power allocation ->
    Monte-Carlo SE for every scheme pair (downlink and uplink schemes are
    paired positionally, e.g. mr/mr then slnr/rzf, sharing the drop's channel
    blocks so scheme comparisons are paired). A drop whose admission fails is
    logged and skipped; the run continues.
    """
    problems = validate_spec(spec)
    if problems:
        raise ValueError("invalid experiment spec: " + "; ".join(map(str, problems)))
    os.makedirs(spec.output_dir, exist_ok=True)
    frame_dl = spec.frame_for("dl")
    frame_ul = spec.frame_for("ul")
    pairs = list(zip_longest(spec.dl_schemes, spec.ul_schemes))

    se_rows = []
    cluster_rows = []
    ap_rows = []
    failures = []
    drop_results = []
    for d in range(spec.drops):
        drop_seed = derive_seed(spec.seed, STREAM_DROP, d)
        network = replace(spec.network, rng_seed=drop_seed)
        try:
            art = prepare_drop(network, spec.propagation, frame_dl, spec.neighbors)
        except MasterCapacityError as exc:
            log.warning("drop %d aborted: %s", d, exc)
            failures.append({"drop": d, "error": str(exc)})
            continue
        adm = art.admission
        evaluations = {}
        closed = None
        for dl_scheme, ul_scheme in pairs:
            norms = None
            if dl_scheme == "mr":
                norms = mr_precoder_norm_sq(art.corr, adm.book, adm.cluster, frame_dl)
            elif dl_scheme is not None:
                norms = estimate_precoder_norm_sq(
                    art.corr, adm.book, adm.cluster, art.alloc, frame_dl, dl_scheme,
                    num_blocks=spec.warmup_blocks, seed=drop_seed,
                    block_batch=spec.block_batch)
            ev = evaluate_schemes(
                art.corr, adm.book, adm.cluster, art.alloc, frame_dl,
                dl_scheme=dl_scheme, ul_scheme=ul_scheme,
                num_blocks=spec.mc_blocks, seed=drop_seed,
                block_batch=spec.block_batch, dl_norms=norms, frame_ul=frame_ul,
                include_genie=spec.include_genie)
            evaluations[(dl_scheme, ul_scheme)] = ev
            for report in (ev.dl, ev.dl_genie, ev.ul, ev.ul_genie):
                if report is not None:
                    se_rows.extend(_report_rows(d, report, adm))
            if dl_scheme == "mr" and spec.include_closed_form:
                closed = closed_form_mr_dl(art.corr, adm.book, adm.cluster,
                                           art.alloc, frame_dl)
                se_rows.extend(_report_rows(d, closed.report, adm))
        drop_results.append(DropResult(drop_id=d, artifacts=art,
                                       evaluations=evaluations, closed_form=closed))
        for k in range(network.num_ues):
            cluster_rows.append([d, k, int(adm.cluster.master[k]),
                                 int(adm.book.pilot_of[k]),
                                 int(adm.summary.cluster_size[k]),
                                 int(adm.summary.notified_neighbors[k])])
        for l in range(network.num_aps):
            ap_rows.append([d, l, int(adm.summary.ap_load[l]),
                            int(adm.summary.ap_mastered[l])])

    se_csv = os.path.join(spec.output_dir, "se_per_ue.csv")
    _write_csv(se_csv, ["drop_id", "ue_id", "scheme", "bound", "link",
                        "se_bits_per_hz", "stderr", "cluster_size", "pilot_id"],
               se_rows)
    clusters_csv = os.path.join(spec.output_dir, "clusters.csv")
    _write_csv(clusters_csv, ["drop_id", "ue_id", "master_ap", "pilot_id",
                              "cluster_size", "neighbors_notified"], cluster_rows)
    ap_csv = os.path.join(spec.output_dir, "ap_load.csv")
    _write_csv(ap_csv, ["drop_id", "ap_id", "num_served", "num_mastered"], ap_rows)

    summary = _summarize(spec, se_rows, failures, drop_results)
    summary_json = os.path.join(spec.output_dir, "summary.json")
    with open(summary_json, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ExperimentResult(summary=summary, se_csv=se_csv,
                            clusters_csv=clusters_csv, ap_load_csv=ap_csv,
                            summary_json=summary_json, drop_results=drop_results)


def _report_rows(drop_id: int, report: SEReport, adm: AdmissionResult) -> list:
    rows = []
    for k in range(len(report.se)):
        rows.append([drop_id, k, report.scheme, report.bound, report.link,
                     _fmt(report.se[k]), _fmt(report.stderr[k]),
                     int(adm.summary.cluster_size[k]), int(adm.book.pilot_of[k])])
    return rows


def _summarize(spec: ExperimentSpec, se_rows: list, failures: list,
               drop_results: list) -> dict:
    groups: dict = {}
    for row in se_rows:
        key = f"{row[4]}/{row[2]}/{row[3]}"
        groups.setdefault(key, []).append(float(row[5]))
    aggregates = {}
    for key, values in sorted(groups.items()):
        arr = np.asarray(values)
        pct = np.percentile(arr, [5, 25, 50, 75, 95])
        aggregates[key] = {
            "mean_se": float(arr.mean()),
            "p05": float(pct[0]), "p25": float(pct[1]), "p50": float(pct[2]),
            "p75": float(pct[3]), "p95": float(pct[4]),
            "n": int(arr.size),
        }
    cluster_sizes = [int(s) for r in drop_results
                     for s in r.artifacts.admission.summary.cluster_size]
    ap_loads = [int(s) for r in drop_results
                for s in r.artifacts.admission.summary.ap_load]
    notifications = sum(int(s) for r in drop_results
                        for s in r.artifacts.admission.summary.notified_neighbors)
    displacements = sum(len(r.artifacts.admission.summary.displaced)
                        for r in drop_results)
    return {
        "config": spec_to_items(spec),
        "drops_completed": len(drop_results),
        "drops_failed": failures,
        "aggregates": aggregates,
        "clusters": {
            "mean_cluster_size": float(np.mean(cluster_sizes)) if cluster_sizes else 0.0,
            "max_ap_load": max(ap_loads) if ap_loads else 0,
            "total_step3_notifications": notifications,
            "total_displacements": displacements,
        },
        "metadata": {
            "se_units": "bit/s/Hz",
            "throughput_multiplier_hz": spec.bandwidth_hz,
            "genie_interference": "instantaneous",
            "densities_per_km2": {
                "aps": spec.network.num_aps / (spec.network.area_side_m / 1000.0) ** 2,
                "ues": spec.network.num_ues / (spec.network.area_side_m / 1000.0) ** 2,
            },
        },
    }


# --- single-antenna gain histogram experiment ---


def slnr_unit_gain_constant() -> float:
    """E{x / (x + 1)^2} for x ~ Exp(1), by numerical integration.

    This is the expected squared SLNR direction norm for one unit-gain UE with
    unit power and unit noise; the normalized gain is bounded by 0.25 / this.
    """
    value, _ = quad(lambda x: x / (1.0 + x) ** 2 * math.exp(-x), 0.0, np.inf)
    return value


@dataclass(frozen=True)
class Fig2Result:
    mr_gain: np.ndarray
    slnr_gain: np.ndarray
    norm_constant: float
    hist_csv: str | None
    samples_csv: str | None


def run_fig2(num_samples: int, seed: int, outdir: str | None = None,
             bins: int = 100, write_samples: bool = False) -> Fig2Result:
    """Normalized effective-gain samples for MR vs SLNR at N = L = K = 1.

    Perfect CSI, unit AP power and unit noise: the MR gain is |h|^2 (mean 1,
    exponential, unbounded) while the SLNR gain is |h|^2 / (|h|^2 + 1)^2
    normalized to mean 1, with support bounded by 0.25 / norm_constant.
    """
    rng = substream(seed, STREAM_FIG2)
    raw = rng.standard_normal((num_samples, 2))
    h = np.sqrt(0.5) * (raw[:, 0] + 1j * raw[:, 1])

    cluster = ClusterState(serving=[[0]], ue_aps=[[0]],
                           master=np.array([0]), slot=[{0: 0}])
    alloc = PowerAlloc(rho=np.array([[1.0]]), p=np.array([1.0]))
    est = EstimateDraw(h_hat={(0, 0): h[:, None]}, block_tag=0)

    mr_dir = precode_mr(est)[(0, 0)]
    mr_gain = np.abs(mr_dir[:, 0]) ** 2  # E{||direction||^2} is exactly 1
    slnr_dir = precode_slnr(est, alloc, cluster, noise_power=1.0)[(0, 0)]
    c = slnr_unit_gain_constant()
    slnr_gain = np.abs(slnr_dir[:, 0]) ** 2 / c

    hist_csv = samples_csv = None
    if outdir is not None:
        os.makedirs(outdir, exist_ok=True)
        rows = []
        for name, gain in (("mr", mr_gain), ("slnr", slnr_gain)):
            density, edges = np.histogram(gain, bins=bins, density=True)
            for j in range(bins):
                rows.append([name, _fmt(edges[j]), _fmt(edges[j + 1]),
                             _fmt(density[j])])
        hist_csv = os.path.join(outdir, "fig2_hist.csv")
        _write_csv(hist_csv, ["scheme", "bin_left", "bin_right", "density"], rows)
        if write_samples:
            samples_csv = os.path.join(outdir, "fig2_samples.csv")
            _write_csv(samples_csv, ["mr_gain", "slnr_gain"],
                       [[_fmt(a), _fmt(b)] for a, b in zip(mr_gain, slnr_gain)])
    return Fig2Result(mr_gain=mr_gain, slnr_gain=slnr_gain, norm_constant=c,
                      hist_csv=hist_csv, samples_csv=samples_csv)


# --- selftest: the oracle gates behind the CLI ---


@dataclass(frozen=True)
class GateResult:
    name: str
    passed: bool
    detail: str


def _desk_network(seed: int) -> tuple[NetworkConfig, PropagationModel, FrameConfig]:
    network = NetworkConfig(area_side_m=400.0, num_aps=16, num_ues=8,
                            antennas_per_ap=2, ap_height_m=10.0, rng_seed=seed)
    frame = FrameConfig(tau_c=200, tau_p=4, tau_u=0, tau_d=196)
    return network, PropagationModel(), frame


def _gate_closed_form(seed: int, blocks: int) -> tuple[GateResult, list]:
    network, prop, frame = _desk_network(derive_seed(seed, STREAM_DROP, 1001))
    art = prepare_drop(network, prop, frame)
    adm = art.admission
    ev = evaluate_schemes(art.corr, adm.book, adm.cluster, art.alloc, frame,
                          dl_scheme="mr", num_blocks=blocks, seed=seed,
                          block_batch=5000, include_genie=False)
    closed = closed_form_mr_dl(art.corr, adm.book, adm.cluster, art.alloc, frame)
    gap = np.abs(ev.dl.se - closed.report.se)
    ratio = gap / np.maximum(ev.dl.stderr, 1e-30)
    rows = [[k, _fmt(ev.dl.se[k]), _fmt(closed.report.se[k]), _fmt(ev.dl.stderr[k]),
             _fmt(ratio[k])] for k in range(len(ev.dl.se))]
    passed = bool(np.all(ratio <= 3.0))
    detail = f"max |mc-closed|/stderr = {_fmt(ratio.max())} over {blocks} blocks"
    return GateResult("mr_closed_form_oracle", passed, detail), rows


def _gate_fig2(seed: int, samples: int) -> GateResult:
    res = run_fig2(samples, seed=seed)
    mr_mean = res.mr_gain.mean()
    mr_var = res.mr_gain.var()
    slnr_mean = res.slnr_gain.mean()
    bound = 0.25 / res.norm_constant
    ok = (abs(mr_mean - 1.0) <= 0.02 and abs(mr_var - 1.0) <= 0.05
          and abs(slnr_mean - 1.0) <= 0.02
          and bool(np.all(res.slnr_gain <= bound + 1e-12)))
    detail = (f"mr mean {_fmt(mr_mean)}, mr var {_fmt(mr_var)}, "
              f"slnr mean {_fmt(slnr_mean)}, slnr max {_fmt(res.slnr_gain.max())} "
              f"<= bound {_fmt(bound)}")
    return GateResult("single_antenna_gain_laws", ok, detail)


def _gate_estimator_covariance(seed: int, blocks: int) -> GateResult:
    from .channel import compute_psi, mmse_estimate, receive_pilots
    network = NetworkConfig(area_side_m=300.0, num_aps=3, num_ues=4,
                            antennas_per_ap=2, ap_height_m=10.0,
                            rng_seed=derive_seed(seed, STREAM_DROP, 1002))
    prop = PropagationModel()
    frame = FrameConfig(tau_c=200, tau_p=2, tau_u=0, tau_d=198)
    placement = place_network(network)
    large = large_scale_gains(placement, network, prop)
    corr = build_correlation(large, placement, network, prop)
    book = PilotBook(assignments=[[0, 2], [1, 3]], pilot_of=np.array([0, 1, 0, 1]))
    cluster = ClusterState(serving=[[0, 1], [2, 3], []],
                           ue_aps=[[0], [0], [1], [1]],
                           master=np.array([0, 0, 1, 1]),
                           slot=[{0: 0, 1: 1}, {0: 2, 1: 3}, {}])
    psi = compute_psi(corr, book, frame)
    worst = 0.0
    done = 0
    batch_idx = 0
    samples = {pair: [] for pair in [(0, 0), (1, 0), (2, 1), (3, 1)]}
    while done < blocks:
        B = min(20000, blocks - done)
        rng = substream(seed, STREAM_DROP, 1003, batch_idx)
        draw = draw_channels(corr, rng, num_blocks=B, block_tag=batch_idx)
        obs = receive_pilots(draw, book, frame, corr, rng)
        est = mmse_estimate(obs, corr, cluster, frame)
        for pair in samples:
            samples[pair].append(est.h_hat[pair])
        done += B
        batch_idx += 1
    p = frame.pilot_powers(4)
    for (k, l), chunks in samples.items():
        hh = np.concatenate(chunks, axis=0)
        emp = (hh.T.conj() @ hh).T / hh.shape[0]
        t = int(book.pilot_of[k])
        inv = np.linalg.inv(psi[t, l])
        expected = p[k] * frame.tau_p * corr.R[k, l] @ inv @ corr.R[k, l]
        rel = np.linalg.norm(emp - expected) / np.linalg.norm(expected)
        worst = max(worst, rel)
    return GateResult("mmse_covariance", worst <= 0.02,
                      f"worst relative Frobenius error {_fmt(worst)} at {blocks} blocks")


def _gate_scalability(seed: int) -> GateResult:
    prop = PropagationModel()
    frame = FrameConfig(tau_c=200, tau_p=4, tau_u=0, tau_d=196)
    tau_p = frame.tau_p
    details = []
    ok = True
    for mult in (1, 4, 16):
        network = NetworkConfig(area_side_m=500.0, num_aps=25, num_ues=tau_p * mult,
                                antennas_per_ap=1, ap_height_m=10.0,
                                rng_seed=derive_seed(seed, STREAM_DROP, 1004, mult))
        art = prepare_drop(network, prop, frame)
        adm = art.admission
        max_load = int(adm.summary.ap_load.max())
        ok = ok and max_load <= tau_p and bool(np.all(adm.cluster.master >= 0))
        details.append(f"K={network.num_ues}: max|D_l|={max_load}")
    return GateResult("scalability_sweep", ok, "; ".join(details))


def _gate_ordering_and_power(seed: int, blocks: int) -> GateResult:
    network, prop, frame = _desk_network(derive_seed(seed, STREAM_DROP, 1005))
    art = prepare_drop(network, prop, frame)
    adm = art.admission
    frame_ul = replace(frame, tau_u=frame.tau_c - frame.tau_p, tau_d=0)
    ok = True
    details = []
    for dl_scheme, ul_scheme in (("mr", "mr"), ("slnr", "rzf")):
        norms = mr_precoder_norm_sq(art.corr, adm.book, adm.cluster, frame) \
            if dl_scheme == "mr" else estimate_precoder_norm_sq(
                art.corr, adm.book, adm.cluster, art.alloc, frame, dl_scheme,
                num_blocks=2000, seed=seed, block_batch=2000)
        ev = evaluate_schemes(art.corr, adm.book, adm.cluster, art.alloc, frame,
                              dl_scheme=dl_scheme, ul_scheme=ul_scheme,
                              num_blocks=blocks, seed=seed, block_batch=5000,
                              dl_norms=norms, frame_ul=frame_ul)
        for bound_report, genie in ((ev.dl, ev.dl_genie), (ev.ul, ev.ul_genie)):
            margin = genie.se - bound_report.se \
                + 3.0 * (genie.stderr + bound_report.stderr)
            ok = ok and bool(np.all(margin >= 0))
        budget = frame.ap_power
        warm_var = np.zeros(network.num_aps)
        for (k, l), var in norms.var_of_mean.items():
            nsq = norms.norm_sq[(k, l)]
            warm_var[l] += (art.alloc.rho[k, l] ** 2) * var / nsq ** 2
        tol = 3.0 * np.sqrt(ev.ap_power_var_of_mean + warm_var)
        ok = ok and bool(np.all(ev.ap_power_mean <= budget + tol))
        details.append(f"{dl_scheme}/{ul_scheme}: max AP power "
                       f"{_fmt(ev.ap_power_mean.max())} (budget {_fmt(budget)})")
    return GateResult("bound_ordering_and_power", ok, "; ".join(details))


@dataclass(frozen=True)
class SelftestResult:
    passed: bool
    gates: list
    report_path: str


def selftest(outdir: str, seed: int = 1, budget: int = 20000) -> SelftestResult:
    """Run the oracle gates at reduced budgets and write a deterministic report.

    The full-tolerance versions live in the acceptance test suite; this is the
    operational smoke check behind `cellfree selftest`.
    """
    os.makedirs(outdir, exist_ok=True)
    gates = []
    oracle, rows = _gate_closed_form(seed, blocks=budget)
    gates.append(oracle)
    _write_csv(os.path.join(outdir, "oracle_per_ue.csv"),
               ["ue_id", "se_mc", "se_closed_form", "stderr", "gap_over_stderr"],
               rows)
    gates.append(_gate_fig2(seed, samples=10 * budget))
    gates.append(_gate_estimator_covariance(seed, blocks=max(budget, 20000)))
    gates.append(_gate_scalability(seed))
    gates.append(_gate_ordering_and_power(seed, blocks=max(budget // 5, 2000)))
    run_fig2(10 * budget, seed=seed, outdir=outdir)

    lines = [f"{'PASS' if g.passed else 'FAIL'} {g.name}: {g.detail}" for g in gates]
    passed = all(g.passed for g in gates)
    lines.append(f"selftest: {'PASS' if passed else 'FAIL'} "
                 f"({sum(g.passed for g in gates)}/{len(gates)} gates)")
    report_path = os.path.join(outdir, "selftest_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return SelftestResult(passed=passed, gates=gates, report_path=report_path)
