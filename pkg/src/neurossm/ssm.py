"""Selective state-space kernel: selection, ZOH discretization, diagonal scan, gating.

Shapes used throughout (batch axis optional on every sequence input)::

    r      (B, T, D)   convolved token sequence, D = d_inner
    delta  (B, T, D)   per-channel step sizes, > 0
    beta   (B, T, S)   input coupling, shared across channels
    gamma  (B, T, S)   readout coupling, shared across channels
    lam    (D, S)      continuous-time diagonal coefficients, < 0

The readout ``u[t, c] = sum_s gamma[t, s] * h[t, c, s]`` contracts the state
axis so ``u`` has width D and can be gated by ``z`` (also width D).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tensor as tt
from .errors import ContractError, DimensionError
from .tensor import Tensor

# Multiply-adds per (channel, state) per step: one recurrence update, one readout.
SCAN_MADS_PER_STATE = 2


@dataclass
class ScanCounter:
    """Instrumented work/memory counters for the scan stage."""

    mads: int = 0
    steps: int = 0
    state_bytes: int = 0

    def reset(self) -> None:
        self.mads = self.steps = self.state_bytes = 0


counter = ScanCounter()


class SsmKernelParams:
    """Learnable parameters of one selective kernel.

    ``lam`` is stored as ``-exp(lambda_raw)`` so it is negative by construction.
    All maps act on the last axis (``x @ w``).
    """

    def __init__(self, lambda_raw, w_delta, b_delta, w_beta, w_gamma, w_z, w_out):
        self.lambda_raw = lambda_raw
        self.w_delta = w_delta
        self.b_delta = b_delta
        self.w_beta = w_beta
        self.w_gamma = w_gamma
        self.w_z = w_z
        self.w_out = w_out
        d_inner, d_state = lambda_raw.shape
        expected = {
            "w_delta": (d_inner, d_inner), "b_delta": (d_inner,),
            "w_beta": (d_inner, d_state), "w_gamma": (d_inner, d_state),
            "w_z": (d_inner, d_inner),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        if w_out.shape[0] != d_inner:
            raise DimensionError(f"w_out: expected ({d_inner}, d_out), got {w_out.shape}")

    @property
    def d_inner(self) -> int:
        return self.lambda_raw.shape[0]

    @property
    def d_state(self) -> int:
        return self.lambda_raw.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_out.shape[1]

    @property
    def lam(self) -> Tensor:
        return tt.neg(tt.exp(self.lambda_raw))

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "lambda_raw": self.lambda_raw, "w_delta": self.w_delta, "b_delta": self.b_delta,
            "w_beta": self.w_beta, "w_gamma": self.w_gamma, "w_z": self.w_z, "w_out": self.w_out,
        }

    @classmethod
    def init(cls, d_inner: int, d_state: int, d_out: int, init) -> SsmKernelParams:
        """Standard stable init.

        ``lam[c, s] = -(s + 1)``; ``softplus(b_delta)`` log-uniform in [1e-3, 1e-1];
        weight matrices fan-in uniform. ``init`` is a :class:`neurossm.model.Initializer`
        bound to this kernel's name prefix.
        """
        raw = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))
        dt = np.exp(init.rng("b_delta").uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
        b_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
        return cls(
            lambda_raw=Tensor(raw, requires_grad=True),
            w_delta=init.fan_in("w_delta", (d_inner, d_inner)),
            b_delta=Tensor(b_delta, requires_grad=True),
            w_beta=init.fan_in("w_beta", (d_inner, d_state)),
            w_gamma=init.fan_in("w_gamma", (d_inner, d_state)),
            w_z=init.fan_in("w_z", (d_inner, d_inner)),
            w_out=init.fan_in("w_out", (d_inner, d_out)),
        )


@dataclass
class SelectionParams:
    delta: Tensor
    beta: Tensor
    gamma: Tensor


def select(params: SsmKernelParams, r) -> SelectionParams:
    r = tt.as_tensor(r)
    if r.shape[-1] != params.d_inner:
        raise DimensionError(f"select: token width {r.shape[-1]} != d_inner {params.d_inner}")
    delta = tt.softplus(tt.linear(r, params.w_delta, params.b_delta))
    beta = tt.linear(r, params.w_beta)
    gamma = tt.linear(r, params.w_gamma)
    return SelectionParams(delta, beta, gamma)


# (e^x - 1) / x and its derivative, with series near 0.
_PHI_SMALL = 1e-6
_DPHI_SMALL = 1e-4


def _phi1(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) < _PHI_SMALL
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x * (0.5 + x / 6.0), np.expm1(safe) / safe)


def _dphi1(x: np.ndarray, a: np.ndarray, phi: np.ndarray) -> np.ndarray:
    small = np.abs(x) < _DPHI_SMALL
    safe = np.where(small, 1.0, x)
    return np.where(small, 0.5 + x * (1.0 / 3.0 + x / 8.0), (a - phi) / safe)


def _phi1_op(x: Tensor) -> Tensor:
    phi = _phi1(x.data)
    return tt.record(phi, (x,), lambda g: (g * _dphi1(x.data, np.exp(x.data), phi),), "phi1")


def discretize(lam, delta_t, beta_t) -> tuple[Tensor, Tensor]:
    """Zero-order-hold coefficients for one or more steps.

    ``A = exp(delta * lam)`` and ``P = (delta * lam)^-1 (exp(delta * lam) - 1) delta beta``,
    elementwise because ``lam`` is diagonal. ``delta_t`` has shape (..., D),
    ``beta_t`` (..., S); outputs have shape (..., D, S).
    """
    lam, delta_t, beta_t = tt.as_tensor(lam), tt.as_tensor(delta_t), tt.as_tensor(beta_t)
    if np.any(delta_t.data <= 0):
        raise ContractError("discretize: step sizes must be strictly positive")
    if np.any(lam.data >= 0):
        raise ContractError("discretize: state coefficients must be strictly negative")
    d = tt.reshape(delta_t, delta_t.shape + (1,))
    b = tt.reshape(beta_t, beta_t.shape[:-1] + (1,) + beta_t.shape[-1:])
    x = tt.mul(d, lam)
    a = tt.exp(x)
    p = tt.mul(tt.mul(_phi1_op(x), d), b)
    return a, p


@njit(cache=True)
def _phi1_scalar(x):
    if abs(x) < _PHI_SMALL:
        return 1.0 + x * (0.5 + x / 6.0)
    return math.expm1(x) / x


@njit(cache=True)
def _scan_fwd_kernel(lam, delta, beta, gamma, r, h, u, hist, keep):
    bsz, steps, d_inner = r.shape
    d_state = lam.shape[1]
    for b in range(bsz):
        h[:, :] = 0.0
        for t in range(steps):
            for c in range(d_inner):
                dt = delta[b, t, c]
                rc = r[b, t, c]
                acc = 0.0
                for s in range(d_state):
                    x = dt * lam[c, s]
                    hv = math.exp(x) * h[c, s] + _phi1_scalar(x) * dt * beta[b, t, s] * rc
                    h[c, s] = hv
                    acc += gamma[b, t, s] * hv
                    if keep:
                        hist[b, t, c, s] = hv
                u[b, t, c] = acc


@njit(cache=True)
def _scan_bwd_kernel(lam, delta, beta, gamma, r, hist, gu,
                     g_lam, g_delta, g_beta, g_gamma, g_r, gh):
    bsz, steps, d_inner = r.shape
    d_state = lam.shape[1]
    for b in range(bsz):
        # gh carries A[t+1] * dL/dh[t+1] into step t
        gh[:, :] = 0.0
        for t in range(steps - 1, -1, -1):
            for c in range(d_inner):
                dt = delta[b, t, c]
                rc = r[b, t, c]
                guc = gu[b, t, c]
                acc_r = 0.0
                acc_d = 0.0
                for s in range(d_state):
                    lm = lam[c, s]
                    x = dt * lm
                    a = math.exp(x)
                    phi = _phi1_scalar(x)
                    if abs(x) < _DPHI_SMALL:
                        dphi = 0.5 + x * (1.0 / 3.0 + x / 8.0)
                    else:
                        dphi = (a - phi) / x
                    bs = beta[b, t, s]
                    g = gh[c, s] + guc * gamma[b, t, s]
                    h_prev = hist[b, t - 1, c, s] if t > 0 else 0.0
                    g_gamma[b, t, s] += guc * hist[b, t, c, s]
                    g_p = g * rc
                    acc_r += g * phi * dt * bs
                    g_x = g * h_prev * a + g_p * dt * bs * dphi
                    acc_d += g_p * phi * bs + g_x * lm
                    g_beta[b, t, s] += g_p * phi * dt
                    g_lam[c, s] += g_x * dt
                    gh[c, s] = g * a
                g_r[b, t, c] = acc_r
                g_delta[b, t, c] = acc_d


def scan_arrays(lam, delta, beta, gamma, r, keep_history: bool = False, state=None):
    """Run the diagonal recurrence on raw (batched) arrays.

    Returns ``(u, history)``; ``history`` holds every state ``h[t]`` when
    ``keep_history`` is set (the backward pass needs it) and is None otherwise.
    Without history the only working memory is the carried state ``h`` of
    shape (D, S), whatever the sequence length. ``state`` may supply that
    buffer.
    """
    bsz, steps, d_inner = r.shape
    d_state = lam.shape[1]
    h = np.empty((d_inner, d_state)) if state is None else state
    u = np.empty((bsz, steps, d_inner))
    hist = np.empty((bsz, steps, d_inner, d_state)) if keep_history else np.empty((1, 1, 1, 1))
    args = [np.ascontiguousarray(v, dtype=np.float64) for v in (lam, delta, beta, gamma, r)]
    _scan_fwd_kernel(*args, h, u, hist, keep_history)
    counter.mads += SCAN_MADS_PER_STATE * bsz * steps * d_inner * d_state
    counter.steps += steps
    counter.state_bytes = max(counter.state_bytes, h.nbytes)
    return u, (hist if keep_history else None)


def _scan_backward(lam, delta, beta, gamma, r, hist, gu):
    bsz, steps, d_inner, d_state = hist.shape
    g_lam = np.zeros_like(lam)
    g_delta = np.empty_like(delta)
    g_beta = np.zeros_like(beta)
    g_gamma = np.zeros_like(gamma)
    g_r = np.empty_like(r)
    gh = np.empty((d_inner, d_state))
    _scan_bwd_kernel(lam, delta, beta, gamma, r, hist, np.ascontiguousarray(gu),
                     g_lam, g_delta, g_beta, g_gamma, g_r, gh)
    return g_lam, g_delta, g_beta, g_gamma, g_r


def scan(lam, delta, beta, gamma, r) -> Tensor:
    """Fused selective scan as a single autodiff node."""
    lam, delta, beta, gamma, r = (tt.as_tensor(v) for v in (lam, delta, beta, gamma, r))
    unbatched = r.ndim == 2
    if r.ndim not in (2, 3) or r.shape[-1] != lam.shape[0]:
        raise DimensionError(f"scan: token shape {r.shape} vs state coefficients {lam.shape}")
    if delta.shape != r.shape or beta.shape[:-1] != r.shape[:-1] or gamma.shape != beta.shape \
            or beta.shape[-1] != lam.shape[1]:
        raise DimensionError("scan: selection parameter shapes do not match the token sequence")
    if r.shape[-2] < 1:
        raise ContractError("scan: need at least one time step")
    arrs = [np.ascontiguousarray(v.data) for v in (delta, beta, gamma, r)]
    if unbatched:
        arrs = [a[None] for a in arrs]
    need_grad = tt.grad_enabled() and any(v.requires_grad for v in (lam, delta, beta, gamma, r))
    u, hist = scan_arrays(lam.data, *arrs, keep_history=need_grad)
    if unbatched:
        u = u[0]

    def back(g):
        gu = g[None] if unbatched else g
        g_lam, *rest = _scan_backward(lam.data, *arrs, hist, gu)
        if unbatched:
            rest = [v[0] for v in rest]
        return (g_lam, *rest)

    return tt.record(u, (lam, delta, beta, gamma, r), back, "selective_scan")


def selective_scan(params: SsmKernelParams, r, sel: SelectionParams | None = None) -> Tensor:
    """Scan ``r`` with selection parameters computed from ``r`` (unless given)."""
    r = tt.as_tensor(r)
    if sel is None:
        sel = select(params, r)
    return scan(params.lam, sel.delta, sel.beta, sel.gamma, r)


def gate_and_project(params: SsmKernelParams, u, r) -> Tensor:
    """``o = w_out (u * silu(w_z r))``."""
    u, r = tt.as_tensor(u), tt.as_tensor(r)
    if u.shape != r.shape:
        raise DimensionError(f"gate_and_project: u {u.shape} vs r {r.shape}")
    z = tt.linear(r, params.w_z)
    y = tt.mul(u, tt.silu(z))
    return tt.linear(y, params.w_out)


def ssm_forward(params: SsmKernelParams, r) -> Tensor:
    r = tt.as_tensor(r)
    sel = select(params, r)
    u = selective_scan(params, r, sel)
    return gate_and_project(params, u, r)
