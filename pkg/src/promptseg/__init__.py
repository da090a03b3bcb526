"""Cross-domain few-shot segmentation testbed.

Episodic training and evaluation of a prompt-driven mask decoder fed by
anchor-transformed frozen features. Desk-scale by default; paper-scale
feature files plug in through the .apfe loader.
"""

from promptseg.tensor import (  # noqa: F401
    ContractError,
    DimensionError,
    NonFiniteError,
    Parameter,
    Tensor,
    adam_step,
    no_grad,
    use_dtype,
)

__version__ = "0.1.0"
