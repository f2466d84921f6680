"""Deterministic Monte-Carlo simulator for scalable cell-free massive MIMO.

The pipeline per network drop: place_network -> large_scale_gains ->
build_correlation -> admit_all -> PowerAlloc.equal_power -> evaluate_schemes,
with closed_form_mr_dl as the deterministic cross-check for MR downlink.
"""

from .config import (Diagnostic, ExperimentSpec, FrameConfig, NeighborParams,
                     NetworkConfig, PropagationModel, load_spec, substream,
                     thermal_noise_w, validate_spec)
from .topology import LargeScale, Placement, large_scale_gains, place_network, \
    wrap_distance
from .channel import (ChannelDraw, EstimateDraw, PilotObservation,
                      SpatialCorrelation, build_correlation, compute_psi,
                      draw_channels, local_scattering_correlation, mmse_estimate,
                      receive_pilots)
from .access import (AdmissionResult, ClusterState, MasterCapacityError, PilotBook,
                     admit_all, appoint_master, assign_pilot, form_cluster)
from .beamforming import (Combiners, PowerAlloc, Precoders, PrecoderNorms,
                          allocate_power_dl, allocate_power_ul, combine_mr,
                          combine_rzf, estimate_precoder_norm_sq,
                          mr_precoder_norm_sq, normalize_precoders, precode_mr,
                          precode_slnr)
from .se import (ClosedFormResult, GenieAccumulator, MomentAccumulator, SEReport,
                 SchemeEvaluation, accumulate_block, closed_form_mr_dl,
                 effective_gains_dl, effective_gains_ul, evaluate_schemes,
                 finalize_se_dl, finalize_se_ul)
from .harness import (DropArtifacts, ExperimentResult, Fig2Result, prepare_drop,
                      run_experiment, run_fig2, selftest, slnr_unit_gain_constant)

__version__ = "0.1.0"
