"""Multiscale differential state-space block (one temporal scale).

A block takes a (B, T, N) sequence, groups every ``tau`` consecutive tokens
into one wider token, builds a backward-difference twin of that rescaled
sequence, runs both through projection -> depthwise conv -> selective SSM,
sums the two streams and unpacks the result back to (B, T, N).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .init import Initializer
from .ssm import SsmKernelParams, ssm_forward
from .tensor import Tensor


@dataclass(frozen=True)
class ScaleConfig:
    tau: int
    n_rois: int
    expand: int = 3
    d_conv: int = 1
    d_state: int = 2
    share_kernel: bool = True
    differential: bool = True

    def __post_init__(self):
        for name in ("tau", "n_rois", "expand", "d_conv", "d_state"):
            if getattr(self, name) < 1:
                raise ContractError(f"ScaleConfig.{name} must be a positive integer")

    @property
    def d_k(self) -> int:
        return self.tau * self.n_rois

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_k


class GatedProjection:
    """``(r @ w_value + b_value) * silu(r @ w_gate + b_gate)``."""

    def __init__(self, w_value, b_value, w_gate, b_gate):
        self.w_value, self.b_value, self.w_gate, self.b_gate = w_value, b_value, w_gate, b_gate

    @classmethod
    def init(cls, d_in: int, d_out: int, init: Initializer) -> GatedProjection:
        return cls(init.fan_in("w_value", (d_in, d_out)), init.fan_in("b_value", (d_out,), fan=d_in),
                   init.fan_in("w_gate", (d_in, d_out)), init.fan_in("b_gate", (d_out,), fan=d_in))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"w_value": self.w_value, "b_value": self.b_value,
                "w_gate": self.w_gate, "b_gate": self.b_gate}


def identity_taps(channels: int, width: int) -> Tensor:
    # latest tap 1, older taps 0: the conv starts as a pass-through
    taps = np.zeros((channels, width))
    taps[:, -1] = 1.0
    return Tensor(taps, requires_grad=True)


class MsdSsbParams:
    """Parameters of one scale. Diff-stream fields are None when differencing is off.

    With ``share_kernel`` the two streams hold the very same
    :class:`SsmKernelParams` object, so one set of gradient buffers receives
    contributions from both.
    """

    def __init__(self, config: ScaleConfig, proj_rescaled, conv_rescaled, kernel_rescaled,
                 proj_diff=None, conv_diff=None, kernel_diff=None):
        self.config = config
        self.proj_rescaled = proj_rescaled
        self.conv_rescaled = conv_rescaled
        self.kernel_rescaled = kernel_rescaled
        self.proj_diff = proj_diff
        self.conv_diff = conv_diff
        self.kernel_diff = kernel_diff

    @classmethod
    def init(cls, config: ScaleConfig, init: Initializer) -> MsdSsbParams:
        d_k, d_inner = config.d_k, config.d_inner
        shared_name = "kernel" if config.share_kernel else "kernel_rescaled"
        kernel_r = SsmKernelParams.init(d_inner, config.d_state, d_k, init.child(shared_name))
        parts = dict(
            proj_rescaled=GatedProjection.init(d_k, d_inner, init.child("proj_rescaled")),
            conv_rescaled=identity_taps(d_inner, config.d_conv),
            kernel_rescaled=kernel_r,
        )
        if config.differential:
            parts.update(
                proj_diff=GatedProjection.init(d_k, d_inner, init.child("proj_diff")),
                conv_diff=identity_taps(d_inner, config.d_conv),
                kernel_diff=kernel_r if config.share_kernel
                else SsmKernelParams.init(d_inner, config.d_state, d_k, init.child("kernel_diff")),
            )
        return cls(config, **parts)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, obj):
            if obj is None:
                return
            if isinstance(obj, Tensor):
                out[prefix] = obj
            else:
                for k, v in obj.named_parameters().items():
                    out[f"{prefix}.{k}"] = v

        put("proj_rescaled", self.proj_rescaled)
        put("conv_rescaled", self.conv_rescaled)
        if self.config.share_kernel:
            put("kernel", self.kernel_rescaled)
        else:
            put("kernel_rescaled", self.kernel_rescaled)
        put("proj_diff", self.proj_diff)
        put("conv_diff", self.conv_diff)
        if not self.config.share_kernel:
            put("kernel_diff", self.kernel_diff)
        return out


def rescale(x, tau: int) -> Tensor:
    """Group every ``tau`` consecutive rows into one row of width ``tau * N``.

    Works on (T, N) or (B, T, N); the trailing ``T mod tau`` rows are dropped.
    """
    x = tt.as_tensor(x)
    steps, n = x.shape[-2], x.shape[-1]
    if tau < 1:
        raise ContractError("rescale: tau must be positive")
    if steps < tau:
        raise ContractError(f"rescale: sequence length {steps} shorter than tau={tau}")
    t_k = steps // tau
    if t_k * tau != steps:
        x = tt.getitem(x, (..., slice(0, t_k * tau), slice(None)))
    return tt.reshape(x, x.shape[:-2] + (t_k, tau * n))


def unpack(z, tau: int, length: int) -> Tensor:
    """Inverse of :func:`rescale`; rows dropped by the rescale come back as zeros."""
    z = tt.as_tensor(z)
    t_k, width = z.shape[-2], z.shape[-1]
    if width % tau:
        raise DimensionError(f"unpack: width {width} not divisible by tau={tau}")
    out = tt.reshape(z, z.shape[:-2] + (t_k * tau, width // tau))
    return tt.pad_after(out, -2, length - t_k * tau)


def difference(x) -> Tensor:
    """Backward difference along time with a zero first row."""
    x = tt.as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ContractError("difference: need a (…, T, d) input with T >= 1")
    out = np.zeros_like(x.data)
    out[..., 1:, :] = x.data[..., 1:, :] - x.data[..., :-1, :]

    def back(g):
        gx = np.zeros_like(g)
        gx[..., 1:, :] += g[..., 1:, :]
        gx[..., :-1, :] -= g[..., 1:, :]
        return (gx,)

    return tt.record(out, (x,), back, "difference")


def gated_project(p: GatedProjection, r) -> Tensor:
    value = tt.linear(r, p.w_value, p.b_value)
    gate = tt.silu(tt.linear(r, p.w_gate, p.b_gate))
    return tt.mul(value, gate)


def depthwise_conv(kernel, x) -> Tensor:
    """Causal per-channel convolution, left zero-padded; tap ``kernel[:, -1]`` hits time t."""
    kernel, x = tt.as_tensor(kernel), tt.as_tensor(x)
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise DimensionError(f"depthwise_conv: kernel {kernel.shape} vs input {x.shape}")
    width = kernel.shape[1]
    steps = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (width - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(width):
        out += kernel.data[:, j] * xp[..., j:j + steps, :]

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(width):
            gxp[..., j:j + steps, :] += g * kernel.data[:, j]
            gk[:, j] = (g * xp[..., j:j + steps, :]).sum(axis=lead)
        return gxp[..., width - 1:, :], gk

    return tt.record(out, (x, kernel), back, "depthwise_conv")


def stream_forward(proj: GatedProjection, conv, kernel: SsmKernelParams, r) -> Tensor:
    return ssm_forward(kernel, depthwise_conv(conv, gated_project(proj, r)))


def msd_ssb_forward(params: MsdSsbParams, x) -> Tensor:
    """(…, T, N) -> (…, T, N) for one scale."""
    x = tt.as_tensor(x)
    cfg = params.config
    if x.shape[-1] != cfg.n_rois:
        raise DimensionError(f"msd_ssb_forward: expected {cfg.n_rois} ROIs, got {x.shape[-1]}")
    xk = rescale(x, cfg.tau)
    z = stream_forward(params.proj_rescaled, params.conv_rescaled, params.kernel_rescaled, xk)
    if params.proj_diff is not None:
        v = stream_forward(params.proj_diff, params.conv_diff, params.kernel_diff, difference(xk))
        z = tt.add(z, v)
    return unpack(z, cfg.tau, x.shape[-2])
