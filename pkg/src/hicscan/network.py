"""UNet autoencoder built from holistic scan blocks, plus FLOP accounting,
effective-receptive-field probing and the binary checkpoint container."""

from dataclasses import asdict, dataclass, field
import io
import json
import os
import struct
import tempfile

import numpy as np
import torch
import torch.nn as nn

from .blocks import HolisticScanBlock
from .errors import DomainError, FormatError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    base_dim: int = 32
    blocks_per_stage: int = 2
    state_size: int = 16
    side: int = 40
    global_residual: bool = False

    def __post_init__(self):
        if self.base_dim < 1 or self.base_dim % 2:
            raise DomainError(f"base_dim must be a positive even number, got {self.base_dim}")
        if self.side < 4 or self.side % 4:
            raise DomainError(f"side must be a positive multiple of 4, got {self.side}")
        if self.blocks_per_stage < 0:
            raise DomainError("blocks_per_stage must be >= 0")
        if self.state_size < 1:
            raise DomainError("state_size must be >= 1")

    def stage_plan(self):
        """``(name, channels, lefn_hidden, side)`` for every block stage."""
        c, s = self.base_dim, self.side
        return [
            ("enc1", c, 4 * c, s),
            ("enc2", 2 * c, 8 * c, s // 2),
            ("bottleneck", 4 * c, 4 * c, s // 4),
            ("dec2", 4 * c, 16 * c, s // 2),
            ("dec1", 2 * c, 8 * c, s),
        ]


def _stage(channels, hidden, config):
    return nn.Sequential(*[HolisticScanBlock(channels, hidden, config.state_size) for _ in range(config.blocks_per_stage)])


def _init_projection(conv, std=0.02):
    nn.init.trunc_normal_(conv.weight, std=std)
    nn.init.zeros_(conv.bias)
    return conv


class Model(nn.Module):
    """Input projection, two encoder stages, bottleneck, two decoder stages with
    skip concatenation, channel reduction and output projection."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        c = config.base_dim
        plan = {name: (ch, hid) for name, ch, hid, _ in config.stage_plan()}
        self.input_proj = _init_projection(nn.Conv2d(1, c, 3, padding=1))
        self.enc1 = _stage(*plan["enc1"], config)
        self.down1 = _init_projection(nn.Conv2d(c, 2 * c, 2, stride=2))
        self.enc2 = _stage(*plan["enc2"], config)
        self.down2 = _init_projection(nn.Conv2d(2 * c, 4 * c, 2, stride=2))
        self.bottleneck = _stage(*plan["bottleneck"], config)
        self.up2 = _init_projection(nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2))
        self.dec2 = _stage(*plan["dec2"], config)
        self.up1 = _init_projection(nn.ConvTranspose2d(4 * c, c, 2, stride=2))
        self.dec1 = _stage(*plan["dec1"], config)
        self.reduce = _init_projection(nn.Conv2d(2 * c, c, 1))
        self.output_proj = _init_projection(nn.Conv2d(c, 1, 3, padding=1))

    def forward(self, x, trace=None):
        """Map a (B, 1, H, W) or (1, H, W) patch to the same shape.

        If ``trace`` is a list, ``(stage, per-sample shape)`` pairs are appended
        to it as the forward pass proceeds.
        """
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        side = self.config.side
        if x.dim() != 4 or x.shape[1:] != (1, side, side):
            raise DomainError(f"expected input of shape (B, 1, {side}, {side}), got {tuple(x.shape)}")

        def log(name, t):
            if trace is not None:
                trace.append((name, tuple(t.shape[1:])))
            return t

        e1 = log("enc1", self.enc1(log("input_proj", self.input_proj(x))))
        e2 = log("enc2", self.enc2(log("down1", self.down1(e1))))
        b = log("bottleneck", self.bottleneck(log("down2", self.down2(e2))))
        d = log("up2", self.up2(b))
        d = log("dec2", self.dec2(log("concat2", torch.cat([d, e2], dim=1))))
        d = log("up1", self.up1(d))
        d = log("dec1", self.dec1(log("concat1", torch.cat([d, e1], dim=1))))
        out = self.output_proj(log("reduce", self.reduce(d)))
        if self.config.global_residual:
            out = out + x
        log("output", out)
        return out.squeeze(0) if squeeze else out


class ConvBaseline(nn.Module):
    """Input and output projections only: the purely local reference model."""

    def __init__(self, channels=32):
        super().__init__()
        self.input_proj = nn.Conv2d(1, channels, 3, padding=1)
        self.output_proj = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, x):
        return self.output_proj(self.input_proj(x))


# ---------------------------------------------------------------------------
# FLOP accounting: one multiply-accumulate = 2 flops. Element-wise work
# (activations, residual adds, discretization exponentials) is not counted.


def conv_flops(kernel, c_in, c_out, h_out, w_out):
    return 2 * kernel * kernel * c_in * c_out * h_out * w_out


def conv_transpose_flops(kernel, c_in, c_out, h_in, w_in):
    return 2 * kernel * kernel * c_in * c_out * h_in * w_in


def linear_flops(d_in, d_out, tokens):
    return 2 * d_in * d_out * tokens


def scan_flops(length, channels, state_size):
    # per state element and step: A_bar*h, B_bar*x, C*h
    return 2 * 3 * length * channels * state_size


def norm_flops(channels, pixels):
    # per element: squared deviation accumulate, affine
    return 2 * 2 * channels * pixels


def block_flops(channels, hidden, side, state_size):
    pixels = side * side
    ss2d = 4 * (3 * linear_flops(channels, state_size, pixels) + scan_flops(pixels, channels, state_size))
    lefn = (
        conv_flops(1, channels, hidden, side, side)
        + conv_flops(3, hidden, hidden, side, side)
        + conv_flops(1, hidden, channels, side, side)
    )
    return 2 * norm_flops(channels, pixels) + ss2d + lefn


@dataclass
class FlopReport:
    layers: list = field(default_factory=list)

    @property
    def total(self):
        return sum(f for _, f in self.layers)

    @property
    def gflops(self):
        return self.total / 1e9


def count_flops(config):
    """Per-layer flop tally of one forward pass at ``config.side``."""
    c, s, n = config.base_dim, config.side, config.state_size
    report = FlopReport()
    add = report.layers.append
    add(("input_proj", conv_flops(3, 1, c, s, s)))
    plan = config.stage_plan()
    stage = {name: (ch, hid, side) for name, ch, hid, side in plan}
    transitions = {
        "enc1": ("down1", conv_flops(2, c, 2 * c, s // 2, s // 2)),
        "enc2": ("down2", conv_flops(2, 2 * c, 4 * c, s // 4, s // 4)),
        "bottleneck": ("up2", conv_transpose_flops(2, 4 * c, 2 * c, s // 4, s // 4)),
        "dec2": ("up1", conv_transpose_flops(2, 4 * c, c, s // 2, s // 2)),
        "dec1": ("reduce", conv_flops(1, 2 * c, c, s, s)),
    }
    for name, _, _, _ in plan:
        ch, hid, side = stage[name]
        for i in range(config.blocks_per_stage):
            add((f"{name}.{i}", block_flops(ch, hid, side, n)))
        add(transitions[name])
    add(("output_proj", conv_flops(3, c, 1, s, s)))
    return report


def backward(model, x, upstream):
    """Reverse-mode gradients of ``<model(x), upstream>``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` maps parameter
    names to tensors shaped like the parameters.
    """
    x = x.detach().clone().requires_grad_()
    out = model(x)
    if out.shape != upstream.shape:
        raise DomainError(f"upstream gradient shape {tuple(upstream.shape)} != output shape {tuple(out.shape)}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(out, (x, *params), grad_outputs=upstream, allow_unused=True)
    param_grads = {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads[1:])}
    return param_grads, grads[0]


# ---------------------------------------------------------------------------


def effective_receptive_field(model, probe=None, n_samples=8, seed=0, side=None):
    """Mean ``|d out[probe] / d input|`` over random inputs, scaled to max 1.

    Returns an (H, W) numpy array. ``probe`` defaults to the centre pixel.
    """
    if side is None:
        side = model.config.side
    if probe is None:
        probe = (side // 2, side // 2)
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(n_samples, 1, side, side, generator=gen, dtype=dtype).requires_grad_()
    out = model(x)
    grad, = torch.autograd.grad(out[:, 0, probe[0], probe[1]].sum(), x)
    sal = grad.abs().mean(dim=0)[0].detach().cpu().numpy().astype(np.float64)
    peak = sal.max()
    return sal / peak if peak > 0 else sal


# ---------------------------------------------------------------------------
# Checkpoint container:
#   u8 version | u32 config-length | config JSON | u32 tensor-count |
#   per tensor: u32 name-length | name | u32 rank | rank x u32 dims | f32 data
# All integers and floats little-endian.


def _write_atomic(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(config, state):
    buf = io.BytesIO()
    buf.write(struct.pack("<B", CHECKPOINT_VERSION))
    cfg = json.dumps(asdict(config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(payload):
    """Return ``(ModelConfig, {name: float32 tensor})``."""
    view = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, = take("<B")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    n_cfg, = take("<I")
    try:
        config = ModelConfig(**json.loads(bytes(view[pos:pos + n_cfg]).decode()))
    except (UnicodeDecodeError, ValueError, TypeError) as err:
        raise FormatError(f"checkpoint: bad config block ({err})") from None
    pos += n_cfg
    count, = take("<I")
    state = {}
    for _ in range(count):
        n_name, = take("<I")
        name = bytes(view[pos:pos + n_name]).decode()
        pos += n_name
        rank, = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if pos + 4 * n > len(view):
            raise FormatError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint tensors")
    return config, state


def save_checkpoint(path, model, state=None):
    _write_atomic(path, encode_checkpoint(model.config, state if state is not None else model.state_dict()))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        config, state = decode_checkpoint(fh.read())
    model = Model(config)
    model.load_state_dict(state)
    return model
