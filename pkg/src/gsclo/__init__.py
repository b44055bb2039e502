"""Joint content-switching and power allocation for rendered-MR uplinks.

A robot streams either full camera images or tiny pose keys to a server that
can re-render missed frames from a learned scene model. This package holds
the shared domain types, fading-channel and outage numerics, the penalty/DC
solver and its robust / power-minimising / multi-robot variants, the
reference allocators they are compared against, and an experiment harness
with a CLI.
"""

__version__ = "0.1.0"

from .apo import (
    ApoSettings,
    InfeasibleError,
    apo_solve,
    binarize_and_repair,
    dc_surrogate,
    ranking_init,
    solve_dc_subproblem,
)
from .channel import (
    ChannelDraw,
    MultiAntennaChannel,
    achievable_rate,
    marcum_q1,
    min_power_for_payload,
    outage_prob,
    rician_sample,
    sample_true_gain,
    zf_effective_gains,
)
from .core import (
    Allocation,
    FrameTrace,
    ScenarioConfig,
    SolveReport,
    fuse_mr,
    gsmr_loss,
    load_trace_csv,
    objective_gsmr,
    psnr,
    save_trace_csv,
    ssim,
    validate_allocation,
    zero_one_penalty,
)
from .extensions import (
    QoeSettings,
    mgs_solve,
    power_saving_factor,
    qgs_prime_closed_form,
    qgs_solve,
)
from .robust import (
    BilsSettings,
    bils_solve,
    evaluate_packet_loss,
    feasibility_check,
    min_power_outage,
    sample_neighborhood,
)

__all__ = [
    "__version__",
    "Allocation", "ApoSettings", "BilsSettings", "ChannelDraw", "FrameTrace",
    "InfeasibleError", "MultiAntennaChannel", "QoeSettings", "ScenarioConfig",
    "SolveReport",
    "achievable_rate", "apo_solve", "bils_solve", "binarize_and_repair",
    "dc_surrogate", "evaluate_packet_loss", "feasibility_check", "fuse_mr",
    "gsmr_loss", "load_trace_csv", "marcum_q1", "mgs_solve",
    "min_power_for_payload", "min_power_outage", "objective_gsmr",
    "outage_prob", "power_saving_factor", "psnr", "qgs_prime_closed_form",
    "qgs_solve", "ranking_init", "rician_sample", "sample_neighborhood",
    "sample_true_gain", "save_trace_csv", "solve_dc_subproblem", "ssim",
    "validate_allocation", "zero_one_penalty", "zf_effective_gains",
]
