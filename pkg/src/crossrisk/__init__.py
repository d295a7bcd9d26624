"""crossrisk: multi-city accident-risk forecasting at desk scale.

A dual-branch spatio-temporal model (grid convolution branch + multi-support
graph branch, each with windowed causal attention and a selective state-space
scan), a synthetic cross-city data engine, and a training/evaluation/
robustness harness, all on a small hand-rolled tensor/autodiff core.
"""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward  # noqa: F401
