"""Configuration objects, deterministic seeding, and the flat config-file format.

Every random quantity in the simulator is drawn from a named substream of a
single root seed, so a (seed, spec) pair fully determines every output byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

# Named RNG substreams; concurrent operations never share generator state.
STREAM_PLACEMENT = 1
STREAM_SHADOWING = 2
STREAM_EVAL = 3
STREAM_WARMUP = 4
STREAM_FIG2 = 5
STREAM_DROP = 6


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator keyed by (seed, path); same key, same stream."""
    key = tuple(int(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def derive_seed(seed: int, *path: int) -> int:
    """Stable 64-bit child seed for (seed, path)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def thermal_noise_w(bandwidth_hz: float, noise_figure_db: float = 7.0) -> float:
    """Receiver noise power in W: -174 dBm/Hz + 10 log10(B) + noise figure."""
    return 10.0 ** ((-174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db - 30.0) / 10.0)


DEFAULT_BANDWIDTH_HZ = 20e6


@dataclass(frozen=True)
class NetworkConfig:
    """Geometry and array size of one network drop."""

    area_side_m: float = 2000.0
    num_aps: int = 400
    num_ues: int = 100
    antennas_per_ap: int = 4
    ap_height_m: float = 10.0
    rng_seed: int = 1

    def __post_init__(self):
        if self.num_aps < 1 or self.num_ues < 1 or self.antennas_per_ap < 1:
            raise ValueError("num_aps, num_ues and antennas_per_ap must all be >= 1")
        if self.area_side_m <= 0:
            raise ValueError("area_side_m must be positive")
        if self.ap_height_m <= 0:
            raise ValueError("ap_height_m must be positive")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be a non-negative 64-bit integer")

    @property
    def total_antennas(self) -> int:
        return self.num_aps * self.antennas_per_ap


@dataclass(frozen=True)
class PropagationModel:
    """Stand-in urban pathloss/shadowing/scattering constants (all configurable).

    beta[dB] = pathloss_offset_db - pathloss_exponent_db * log10(d_3d / 1 m)
    plus i.i.d. log-normal shadowing, plus a Gaussian local-scattering angular
    profile for the per-pair antenna correlation.
    """

    pathloss_offset_db: float = -30.5
    pathloss_exponent_db: float = 36.7
    shadowing_std_db: float = 4.0
    asd_deg: float = 15.0
    antenna_spacing: float = 0.5  # in wavelengths

    def __post_init__(self):
        if self.shadowing_std_db < 0:
            raise ValueError("shadowing_std_db must be >= 0")
        if self.asd_deg <= 0:
            raise ValueError("asd_deg must be positive")
        if self.antenna_spacing <= 0:
            raise ValueError("antenna_spacing must be positive")


@dataclass(frozen=True)
class FrameConfig:
    """Coherence-block split and transmit/noise powers (linear W)."""

    tau_c: int = 200
    tau_p: int = 10
    tau_u: int = 0
    tau_d: int = 190
    pilot_power: float = 0.1
    noise_power: float = thermal_noise_w(DEFAULT_BANDWIDTH_HZ)
    ap_power: float = 0.1
    ue_max_power: float = 0.1

    def __post_init__(self):
        if self.tau_p < 1:
            raise ValueError("tau_p must be >= 1")
        if min(self.tau_c, self.tau_u, self.tau_d) < 0:
            raise ValueError("frame lengths must be non-negative")

    def pilot_powers(self, num_ues: int) -> np.ndarray:
        return np.full(num_ues, self.pilot_power)

    @property
    def split_ok(self) -> bool:
        return self.tau_p + self.tau_u + self.tau_d == self.tau_c


@dataclass(frozen=True)
class NeighborParams:
    """Which APs the master notifies during cluster formation."""

    delta_db: float = 40.0   # admit neighbors within this gain gap of the master
    max_neighbors: int = 20  # cap at the strongest ones

    def __post_init__(self):
        if self.delta_db < 0 or self.max_neighbors < 0:
            raise ValueError("neighbor parameters must be non-negative")


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment: geometry, frame, schemes, Monte-Carlo budget, outputs.

    The frame split follows the evaluation convention: the whole data part of
    the block goes to the link being evaluated, i.e. tau_d = tau_c - tau_p for
    downlink and tau_u = tau_c - tau_p for uplink (see frame_for).
    """

    network: NetworkConfig = field(default_factory=NetworkConfig)
    propagation: PropagationModel = field(default_factory=PropagationModel)
    frame: FrameConfig = field(default_factory=FrameConfig)
    neighbors: NeighborParams = field(default_factory=NeighborParams)
    dl_schemes: tuple[str, ...] = ("mr", "slnr")
    ul_schemes: tuple[str, ...] = ("mr", "rzf")
    include_genie: bool = True
    include_closed_form: bool = True
    drops: int = 50
    mc_blocks: int = 10000
    warmup_blocks: int = 2000
    block_batch: int = 1000
    seed: int = 1
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ  # reporting metadata only
    output_dir: str = "runs/default"

    def __post_init__(self):
        for name in ("drops", "mc_blocks", "warmup_blocks", "block_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for s in self.dl_schemes:
            if s not in ("mr", "slnr"):
                raise ValueError(f"unknown downlink scheme {s!r}")
        for s in self.ul_schemes:
            if s not in ("mr", "rzf"):
                raise ValueError(f"unknown uplink scheme {s!r}")

    def frame_for(self, link: str) -> FrameConfig:
        data = self.frame.tau_c - self.frame.tau_p
        if link == "dl":
            return replace(self.frame, tau_d=data, tau_u=0)
        if link == "ul":
            return replace(self.frame, tau_u=data, tau_d=0)
        raise ValueError(f"link must be 'dl' or 'ul', got {link!r}")


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


def validate_frame(frame: FrameConfig) -> list[Diagnostic]:
    out = []
    if not frame.split_ok:
        out.append(Diagnostic(
            "frame_split",
            f"frame split violated: tau_p+tau_u+tau_d = "
            f"{frame.tau_p + frame.tau_u + frame.tau_d} != tau_c = {frame.tau_c}"))
    for name in ("pilot_power", "ap_power", "ue_max_power"):
        if getattr(frame, name) < 0:
            out.append(Diagnostic("negative_power", f"{name} is negative"))
    if frame.noise_power <= 0:
        out.append(Diagnostic("noise_power", "noise_power must be positive for MMSE estimation"))
    return out


def validate_spec(spec: ExperimentSpec) -> list[Diagnostic]:
    """Machine-readable consistency diagnostics; never raises."""
    out = []
    for link in ("dl", "ul"):
        for d in validate_frame(spec.frame_for(link)):
            if d not in out:
                out.append(d)
    net = spec.network
    if net.num_ues > net.num_aps * spec.frame.tau_p:
        out.append(Diagnostic(
            "density",
            f"network cannot admit every UE: num_ues = {net.num_ues} exceeds "
            f"num_aps * tau_p = {net.num_aps * spec.frame.tau_p} serving slots"))
    return out


# --- flat config-file format: "section.key = value" lines, '#' comments ---

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_schemes(raw: str) -> tuple[str, ...]:
    return tuple(s.strip().lower() for s in raw.split(",") if s.strip())


_KEY_TABLE = {
    "network.area_side_m": ("network", "area_side_m", float),
    "network.num_aps": ("network", "num_aps", int),
    "network.num_ues": ("network", "num_ues", int),
    "network.antennas_per_ap": ("network", "antennas_per_ap", int),
    "network.ap_height_m": ("network", "ap_height_m", float),
    "propagation.pathloss_offset_db": ("propagation", "pathloss_offset_db", float),
    "propagation.pathloss_exponent_db": ("propagation", "pathloss_exponent_db", float),
    "propagation.shadowing_std_db": ("propagation", "shadowing_std_db", float),
    "propagation.asd_deg": ("propagation", "asd_deg", float),
    "propagation.antenna_spacing": ("propagation", "antenna_spacing", float),
    "frame.tau_c": ("frame", "tau_c", int),
    "frame.tau_p": ("frame", "tau_p", int),
    "frame.pilot_power_w": ("frame", "pilot_power", float),
    "frame.noise_power_w": ("frame", "noise_power", float),
    "frame.ap_power_w": ("frame", "ap_power", float),
    "frame.ue_max_power_w": ("frame", "ue_max_power", float),
    "neighbors.delta_db": ("neighbors", "delta_db", float),
    "neighbors.max_neighbors": ("neighbors", "max_neighbors", int),
    "experiment.dl_schemes": (None, "dl_schemes", _parse_schemes),
    "experiment.ul_schemes": (None, "ul_schemes", _parse_schemes),
    "experiment.include_genie": (None, "include_genie", "bool"),
    "experiment.include_closed_form": (None, "include_closed_form", "bool"),
    "experiment.drops": (None, "drops", int),
    "experiment.mc_blocks": (None, "mc_blocks", int),
    "experiment.warmup_blocks": (None, "warmup_blocks", int),
    "experiment.block_batch": (None, "block_batch", int),
    "experiment.seed": (None, "seed", int),
    "experiment.bandwidth_hz": (None, "bandwidth_hz", float),
    "experiment.output_dir": (None, "output_dir", str),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse 'key = value' lines into a flat dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key.lower()] = value
    return out


def spec_from_items(items: dict[str, str], base: ExperimentSpec | None = None) -> ExperimentSpec:
    """Build an ExperimentSpec from flat dotted keys, overlaying the defaults."""
    spec = base or ExperimentSpec()
    sections = {
        "network": dict(_as_items(spec.network)),
        "propagation": dict(_as_items(spec.propagation)),
        "frame": dict(_as_items(spec.frame)),
        "neighbors": dict(_as_items(spec.neighbors)),
    }
    top: dict[str, object] = {}
    for key, raw in items.items():
        try:
            section, attr, conv = _KEY_TABLE[key]
        except KeyError:
            raise ValueError(f"unknown config key {key!r}") from None
        if conv == "bool":
            try:
                value: object = _BOOL[raw.lower()]
            except KeyError:
                raise ValueError(f"{key}: expected a boolean, got {raw!r}") from None
        else:
            value = conv(raw)
        if section is None:
            top[attr] = value
        else:
            sections[section][attr] = value
    network = NetworkConfig(**sections["network"])
    propagation = PropagationModel(**sections["propagation"])
    frame = FrameConfig(**sections["frame"])
    neighbors = NeighborParams(**sections["neighbors"])
    spec = replace(spec, network=network, propagation=propagation,
                   frame=frame, neighbors=neighbors, **top)
    # evaluation convention: the data part of the block goes to the evaluated link
    return replace(spec, frame=replace(spec.frame,
                                       tau_d=spec.frame.tau_c - spec.frame.tau_p, tau_u=0))


def _as_items(obj) -> list[tuple[str, object]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


def load_spec(path: str | None = None, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    items: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            items.update(parse_config_text(fh.read()))
    if overrides:
        items.update({k.lower(): v for k, v in overrides.items()})
    return spec_from_items(items)


def spec_to_items(spec: ExperimentSpec) -> dict[str, str]:
    """Flat dotted-key view of a spec (the inverse of spec_from_items)."""
    out = {}
    for key, (section, attr, conv) in _KEY_TABLE.items():
        obj = spec if section is None else getattr(spec, section)
        value = getattr(obj, attr)
        if conv is _parse_schemes:
            out[key] = ",".join(value)
        elif conv == "bool":
            out[key] = "true" if value else "false"
        else:
            out[key] = format(value, ".12g") if isinstance(value, float) else str(value)
    return out


def default_config_text() -> str:
    lines = ["# cellfree experiment profile (defaults shown; edit and pass via --config)"]
    lines += [f"{k} = {v}" for k, v in spec_to_items(ExperimentSpec()).items()]
    return "\n".join(lines) + "\n"
