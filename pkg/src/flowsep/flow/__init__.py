from flowsep.flow.checkpoint import load_model, save_model
from flowsep.flow.glow import (
    GlowConfig,
    GlowModel,
    Tape,
    backward,
    glow_forward,
    glow_inverse,
    log_likelihood,
)
from flowsep.flow.layers import (
    ActNorm,
    AffineCoupling,
    FlowStep,
    InvConv1x1,
    squeeze,
    standard_normal_logpdf,
    unsqueeze,
)

__all__ = [
    "ActNorm", "AffineCoupling", "FlowStep", "GlowConfig", "GlowModel", "InvConv1x1", "Tape",
    "backward", "glow_forward", "glow_inverse", "load_model", "log_likelihood", "save_model",
    "squeeze", "standard_normal_logpdf", "unsqueeze",
]
