"""Near-field integrated sensing and communications: bounds, waveform design, MUSIC."""

__version__ = "0.1.0"

from .array import (FresnelRegionWarning, HybridFrontEnd, InfeasibleWaveformError, IsacWaveform,
                    PolarPoint, UlaConfig, achievable_rate, comm_channel, near_field_steering,
                    pathloss_gain, sensing_channel)
from .crb import CrbMatrix, crb, crb_hybrid, far_field_crb, fim, steering_derivatives
from .optimizer import (DesignInfeasibleError, DesignResult, DesignScenario, SolverFailureError,
                        design_fully_digital, design_hybrid)

__all__ = [
    "__version__",
    "FresnelRegionWarning", "HybridFrontEnd", "InfeasibleWaveformError", "IsacWaveform",
    "PolarPoint", "UlaConfig", "achievable_rate", "comm_channel", "near_field_steering",
    "pathloss_gain", "sensing_channel",
    "CrbMatrix", "crb", "crb_hybrid", "far_field_crb", "fim", "steering_derivatives",
    "DesignInfeasibleError", "DesignResult", "DesignScenario", "SolverFailureError",
    "design_fully_digital", "design_hybrid",
]
