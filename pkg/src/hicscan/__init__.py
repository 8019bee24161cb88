"""Selective-scan UNet for enhancing low-coverage Hi-C contact maps.

Submodules:
    ssm: diagonal state-space models and the input-selective scan.
    blocks: cross scan/merge, SS2D, LEFN and the holistic scan block.
    network: the UNet, flop accounting, receptive fields, checkpoints.
    data: map I/O and preprocessing, synthetic maps.
    training: L1 loss, Adam, training loop, gradient checks.
    metrics: SSIM, PSNR, PCC, SRCC, distance profiles, loop weighted scores.
    cli: the ``hicscan`` command.
"""

from .errors import ConvergenceError, DomainError, FormatError, NumericalError, ParameterDomainError, ScaleError

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DomainError",
    "FormatError",
    "NumericalError",
    "ParameterDomainError",
    "ScaleError",
]
