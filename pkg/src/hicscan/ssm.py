"""Diagonal state space models: discretization, recurrent and convolutional scans,
and the input-selective scan used inside the network.

The linear time-invariant (LTI) helpers work on numpy arrays and are mostly used
as reference paths. :class:`SelectiveScan` is the trainable torch module whose
forward and backward passes run through compiled loops in ``_kernels``.
"""

from dataclasses import dataclass
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _kernels
from .errors import DomainError, ParameterDomainError

SERIES_CUTOFF = _kernels.SERIES_CUTOFF


@dataclass(frozen=True)
class ContinuousSsm:
    """Continuous-time diagonal SSM ``h' = A h + B x``, ``y = C h``.

    ``A``, ``B`` and ``C`` are length-N vectors (A holds the diagonal).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        for name in ("A", "B", "C"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not self.A.ndim == self.B.ndim == self.C.ndim == 1:
            raise DomainError("A, B and C must be vectors of diagonal/state entries")
        if not len(self.A) == len(self.B) == len(self.C):
            raise DomainError(f"inconsistent state sizes: {len(self.A)}, {len(self.B)}, {len(self.C)}")

    @property
    def state_size(self):
        return len(self.A)


@dataclass(frozen=True)
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        for name in ("A_bar", "B_bar", "C"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if not len(self.A_bar) == len(self.B_bar) == len(self.C):
            raise DomainError("A_bar, B_bar and C must have the same length")


def zoh_factor(z):
    """``(exp(z) - 1) / z`` elementwise, using ``1 + z/2`` where ``|z| < 1e-8``."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def discretize(ssm):
    """Zeroth-order-hold discretization of a diagonal continuous SSM.

    Returns a :class:`DiscreteSsm` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (delta*A)^-1 (exp(delta*A) - I) delta*B``.
    """
    if not ssm.delta > 0:
        raise ParameterDomainError(f"timescale must be positive, got {ssm.delta}")
    z = ssm.delta * ssm.A
    return DiscreteSsm(np.exp(z), zoh_factor(z) * ssm.delta * ssm.B, ssm.C)


def scan_recurrent(ssm, x):
    """Run ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C h_t`` from ``h_0 = 0``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.ndim != 1 or len(x) == 0:
        raise DomainError("scan_recurrent needs a non-empty 1-D sequence")
    h = np.zeros_like(ssm.A_bar)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = ssm.A_bar * h + ssm.B_bar * xt
        y[t] = ssm.C @ h
    return y


def build_kernel(ssm, length):
    """Taps ``K[t] = C A_bar^t B_bar`` for ``t = 0 .. length-1``."""
    if length < 1:
        raise DomainError(f"kernel length must be >= 1, got {length}")
    powers = ssm.A_bar[None, :] ** np.arange(length)[:, None]
    return powers @ (ssm.C * ssm.B_bar)


def scan_kernel(x, kernel):
    """Causal convolution ``y_t = sum_{s<=t} K[s] x_{t-s}``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    kernel = np.atleast_1d(np.asarray(kernel, dtype=np.float64))
    if len(x) != len(kernel):
        raise DomainError(f"sequence length {len(x)} does not match kernel length {len(kernel)}")
    return np.convolve(x, kernel)[: len(x)]


class _ScanFunction(torch.autograd.Function):
    """Autograd bridge to the compiled scan. ``delta`` is per batch element (B, D)."""

    @staticmethod
    def forward(x, delta, A, Bm, C):
        arrays = [t.detach().cpu().contiguous().numpy() for t in (x, delta, A, Bm, C)]
        y = _kernels.scan_forward(*arrays)
        return torch.from_numpy(y).to(x.device)

    @staticmethod
    def setup_context(ctx, inputs, output):
        ctx.save_for_backward(*inputs)

    @staticmethod
    def backward(ctx, gy):
        arrays = [t.detach().cpu().contiguous().numpy() for t in ctx.saved_tensors]
        grads = _kernels.scan_backward(*arrays, gy.detach().cpu().contiguous().numpy())
        return tuple(torch.from_numpy(g).to(gy.device) for g in grads)

    @staticmethod
    def vmap(info, in_dims, x, delta, A, Bm, C):
        # fold the vmapped dimension into the batch dimension
        size = info.batch_size
        args = []
        for t, dim in zip((x, delta, A, Bm, C), in_dims):
            t = t.unsqueeze(0).expand(size, *t.shape) if dim is None else t.movedim(dim, 0)
            args.append(t)
        nb = args[0].shape[1]
        flat = [a.reshape(size * nb, *a.shape[2:]) for a in args]
        y = _ScanFunction.apply(*flat)
        return y.reshape(size, nb, *y.shape[1:]), 0


def selective_scan_core(x, delta, A, Bm, C):
    """Input-selective scan over already-projected per-step parameters.

    Args:
        x: (B, T, D) input sequence.
        delta: (D,) or (B, D) positive timescale.
        A, Bm, C: (B, T, N) per-step diagonal state, input and output vectors.

    Returns:
        (B, T, D) output sequence.
    """
    if x.dim() != 3:
        raise DomainError(f"expected (B, T, D) input, got shape {tuple(x.shape)}")
    nb, nt, nd = x.shape
    if nt < 1:
        raise DomainError("empty sequence")
    for name, t in (("A", A), ("B", Bm), ("C", C)):
        if t.shape[:2] != (nb, nt) or t.dim() != 3:
            raise DomainError(f"{name} has shape {tuple(t.shape)}, expected ({nb}, {nt}, N)")
    if delta.dim() == 1:
        delta = delta.unsqueeze(0).expand(nb, nd)
    if delta.shape != (nb, nd):
        raise DomainError(f"delta has shape {tuple(delta.shape)}, expected ({nd},) or ({nb}, {nd})")
    return _ScanFunction.apply(x, delta, A, Bm, C)


class SelectiveScan(nn.Module):
    """Selective scan with per-step A, B, C obtained by linear maps of the input.

    The effective timescale is ``softplus(delta_raw)`` and the per-step state
    entries are ``-softplus(W_A x + b_A)``, which keeps every ``|A_bar| < 1``.
    """

    def __init__(self, channels, state_size=16, dt_min=1e-3, dt_max=0.1, init_std=0.02):
        super().__init__()
        if state_size < 1:
            raise DomainError(f"state size must be >= 1, got {state_size}")
        self.channels = channels
        self.state_size = state_size
        self.proj_A = nn.Linear(channels, state_size)
        self.proj_B = nn.Linear(channels, state_size)
        self.proj_C = nn.Linear(channels, state_size)
        self.delta_raw = nn.Parameter(torch.empty(channels))
        for lin in (self.proj_A, self.proj_B, self.proj_C):
            nn.init.trunc_normal_(lin.weight, std=init_std)
            nn.init.zeros_(lin.bias)
        # log-uniform timescales, as in S4-style initialisation
        dt = torch.exp(torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.delta_raw.copy_(dt + torch.log(-torch.expm1(-dt)))

    def step_parameters(self, x):
        """Per-step ``(delta, A, B, C)`` for an input of shape (B, T, D)."""
        if x.shape[-1] != self.channels:
            raise DomainError(f"expected {self.channels} features, got {x.shape[-1]}")
        delta = F.softplus(self.delta_raw)
        A = -F.softplus(self.proj_A(x))
        return delta, A, self.proj_B(x), self.proj_C(x)

    def forward(self, x):
        delta, A, Bm, C = self.step_parameters(x)
        return selective_scan_core(x, delta, A, Bm, C)


def selective_scan(x, params):
    """Functional form: run ``params`` (a :class:`SelectiveScan`) over ``x``.

    ``x`` may be (T, D) or (B, T, D); the output has the same shape.
    """
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
    y = params(x)
    return y.squeeze(0) if squeeze else y
