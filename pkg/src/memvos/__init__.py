"""memvos: memory-matching video object segmentation on a numpy autodiff core.

The package couples three mechanisms around a small recurrent engine:
a cross-scale long-term matcher over a growing feature memory, a
cost-volume-conditioned short-term matcher against the previous frame,
and a compensatory decoder that mixes a context-carrying second decode
pass into the main one. Everything runs on the reverse-mode tensor core
in :mod:`memvos.autodiff`; no GPU framework is involved.
"""

from memvos.autodiff import Tensor, Parameter, no_grad, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Parameter", "no_grad", "grad_check", "__version__"]
