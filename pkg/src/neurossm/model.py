"""NeuroSSM classifier: stacked multiscale layers, mean pooling, linear head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .block import MsdSsbParams, ScaleConfig, msd_ssb_forward
from .errors import ContractError, DimensionError
from .init import Initializer
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_rois: int
    n_classes: int = 2
    num_layers: int = 1
    tau_set: tuple[int, ...] = (1, 2, 3)
    d_state: int = 2
    d_conv: int = 1
    expand: int = 3
    share_kernel: bool = True
    enable_multiscale: bool = True
    enable_differential: bool = True
    eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        tau = tuple(int(t) for t in self.tau_set)
        if not self.enable_multiscale:
            tau = (1,)
        object.__setattr__(self, "tau_set", tau)
        if not tau or any(t < 1 for t in tau) or any(b <= a for a, b in zip(tau, tau[1:])):
            raise ContractError(f"tau_set must be strictly increasing positive ints, got {tau}")
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")
        for name in ("n_rois", "num_layers", "d_state", "d_conv", "expand"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.eps < 0:
            raise ContractError("eps must be non-negative")

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def scale_configs(self) -> list[ScaleConfig]:
        return [ScaleConfig(tau=t, n_rois=self.n_rois, expand=self.expand, d_conv=self.d_conv,
                            d_state=self.d_state, share_kernel=self.share_kernel,
                            differential=self.enable_differential) for t in self.tau_set]

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(str(t) for t in v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            else:
                out[f.name] = repr(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> ModelConfig:
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise ContractError(f"unknown model config key {key!r}")
            kwargs[key] = parse_value(types[key], raw)
        return cls(**kwargs)


def parse_value(kind: str, raw: str):
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        return tuple(int(p) for p in raw.replace("(", "").replace(")", "").split(",") if p.strip())
    return raw


@dataclass
class Layer:
    ln_in_gain: Tensor
    ln_in_bias: Tensor
    ln_out_gain: Tensor
    ln_out_bias: Tensor
    blocks: list[MsdSsbParams] = field(default_factory=list)


class NeuroSsmModel:
    def __init__(self, config: ModelConfig, layers: list[Layer], head_w: Tensor, head_b: Tensor):
        self.config = config
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, config: ModelConfig) -> NeuroSsmModel:
        root = Initializer(config.seed)
        n = config.n_rois
        layers = []
        for li in range(config.num_layers):
            lin = root.child(f"layers.{li}")
            layer = Layer(lin.const((n,), 1.0), lin.const((n,), 0.0),
                          lin.const((n,), 1.0), lin.const((n,), 0.0))
            for sc in config.scale_configs():
                layer.blocks.append(MsdSsbParams.init(sc, lin.child(f"scale{sc.tau}")))
            layers.append(layer)
        head_w = root.fan_in("head.weight", (n, config.n_classes))
        head_b = root.const((config.n_classes,), 0.0)
        return cls(config, layers, head_w, head_b)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for li, layer in enumerate(self.layers):
            p = f"layers.{li}"
            out[f"{p}.ln_in.gain"] = layer.ln_in_gain
            out[f"{p}.ln_in.bias"] = layer.ln_in_bias
            out[f"{p}.ln_out.gain"] = layer.ln_out_gain
            out[f"{p}.ln_out.bias"] = layer.ln_out_bias
            for block in layer.blocks:
                for k, v in block.named_parameters().items():
                    out[f"{p}.scale{block.config.tau}.{k}"] = v
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward(self, x) -> Tensor:
        return forward(self, x)

    def features(self, x) -> Tensor:
        return encode(self, x)

    def predict_proba(self, x) -> np.ndarray:
        return predict_proba(self, x)


def layer_forward(layer: Layer, x, eps: float) -> Tensor:
    """One NeuroSSM module: LN_in, scale bank summed, LN_out, GELU."""
    b = tt.layer_norm(x, layer.ln_in_gain, layer.ln_in_bias, eps)
    z = None
    for block in layer.blocks:
        zk = msd_ssb_forward(block, b)
        z = zk if z is None else tt.add(z, zk)
    return tt.gelu(tt.layer_norm(z, layer.ln_out_gain, layer.ln_out_bias, eps))


def encode(model: NeuroSsmModel, x) -> Tensor:
    """Sequence representation B_L before pooling, shape (…, T, N)."""
    x = tt.as_tensor(x)
    cfg = model.config
    if x.ndim not in (2, 3) or x.shape[-1] != cfg.n_rois:
        raise DimensionError(f"expected (T, {cfg.n_rois}) or (B, T, {cfg.n_rois}) input, got {x.shape}")
    if x.shape[-2] < max(cfg.tau_set):
        raise ContractError(f"sequence length {x.shape[-2]} < largest tau {max(cfg.tau_set)}")
    for layer in model.layers:
        x = layer_forward(layer, x, cfg.eps)
    return x


def forward(model: NeuroSsmModel, x) -> Tensor:
    """Logits, shape (n_classes,) for a (T, N) input or (B, n_classes) for (B, T, N)."""
    g = tt.mean(encode(model, x), axis=-2)
    return tt.linear(g, model.head_w, model.head_b)


def predict_proba(model: NeuroSsmModel, x) -> np.ndarray:
    with tt.no_grad():
        return tt.softmax(forward(model, x), axis=-1).data


def param_count(config: ModelConfig) -> int:
    """Closed-form learnable-scalar count.

    Per layer: 4N (two LayerNorms). Per scale with d_k = tau*N, D = expand*d_k
    and S = d_state, each stream owns a gated projection 2(d_k*D + D) and a
    conv D*d_conv; each kernel holds D*S (lambda) + D*D + D (delta map) +
    2*D*S (beta, gamma) + D*D (gate) + D*d_k (out). Streams: 2 with
    differencing else 1; kernels: 1 if shared or single-stream else 2.
    Head: N*C + C.
    """
    n, s = config.n_rois, config.d_state
    streams = 2 if config.enable_differential else 1
    kernels = 1 if (config.share_kernel or streams == 1) else 2
    per_layer = 4 * n
    for tau in config.tau_set:
        d_k = tau * n
        d = config.expand * d_k
        stream = 2 * (d_k * d + d) + d * config.d_conv
        kernel = d * s + d * d + d + 2 * d * s + d * d + d * d_k
        per_layer += streams * stream + kernels * kernel
    return config.num_layers * per_layer + n * config.n_classes + config.n_classes
