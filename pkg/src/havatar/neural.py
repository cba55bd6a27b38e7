"""Trainable fields: opacity, feature and color networks.

The opacity net maps a canonical point in [0,1]^3 to an alpha in [0,1]; the
feature net maps the same domain to an 8D feature in [0,1]^8; the color net
maps (feature, view direction) to linear RGB. Opacity and feature nets use
a multiresolution hash-grid positional encoding feeding a 4x128 ReLU MLP
with sigmoid output; the color net is a plain 2x16 ReLU MLP with sigmoid
output so it stays cheap enough to evaluate per fragment after export.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .io_util import read_container, write_container

CHECKPOINT_FORMAT = "havatar-checkpoint"
CHECKPOINT_VERSION = 1

FEATURE_DIM = 8
COLOR_IN_DIM = FEATURE_DIM + 3

# spatial hash primes; first coordinate deliberately unmixed
_PRIMES = (1, 2654435761, 805459861)


class NeuralError(Exception):
    pass


@dataclass
class EncoderConfig:
    levels: int = 16
    features_per_entry: int = 2
    base_resolution: int = 16
    finest_resolution: int = 2048
    log2_table_size: int = 19


@dataclass
class FieldConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden_width: int = 128
    hidden_layers: int = 4
    color_hidden_width: int = 16
    color_hidden_layers: int = 2
    seed: int = 0


class HashGridEncoder(nn.Module):
    """Multiresolution hash grid with trilinear interpolation.

    Level resolutions grow geometrically from base to finest. Each level owns
    a table of `2**log2_table_size` feature rows; grid corners index it with
    the usual xor-of-primes spatial hash. Collisions are resolved by the
    additive gradient scatter autograd performs on the gather.
    """

    def __init__(self, cfg: EncoderConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        if cfg.levels > 1:
            growth = (cfg.finest_resolution / cfg.base_resolution) ** (1.0 / (cfg.levels - 1))
        else:
            growth = 1.0
        self.resolutions = [
            int(np.floor(cfg.base_resolution * growth**i)) for i in range(cfg.levels)
        ]
        table_size = 2**cfg.log2_table_size
        init = torch.empty(cfg.levels, table_size, cfg.features_per_entry)
        init.uniform_(-1e-4, 1e-4, generator=generator)
        self.tables = nn.Parameter(init)

    @property
    def out_dim(self) -> int:
        return self.cfg.levels * self.cfg.features_per_entry

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.ndim != 2 or p.shape[1] != 3:
            raise NeuralError(f"encoder expects (B, 3) points, got {tuple(p.shape)}")
        table_size = self.tables.shape[1]
        outs = []
        for lvl, res in enumerate(self.resolutions):
            scaled = p * res
            cell = torch.clamp(scaled.floor().long(), min=0, max=res - 1)
            frac = scaled - cell
            feats = None
            for corner in range(8):
                ox, oy, oz = corner & 1, (corner >> 1) & 1, (corner >> 2) & 1
                cx = cell[:, 0] + ox
                cy = cell[:, 1] + oy
                cz = cell[:, 2] + oz
                idx = (cx * _PRIMES[0]) ^ (cy * _PRIMES[1]) ^ (cz * _PRIMES[2])
                idx = idx % table_size
                w = (
                    (frac[:, 0] if ox else 1.0 - frac[:, 0])
                    * (frac[:, 1] if oy else 1.0 - frac[:, 1])
                    * (frac[:, 2] if oz else 1.0 - frac[:, 2])
                )
                contrib = self.tables[lvl][idx] * w[:, None]
                feats = contrib if feats is None else feats + contrib
            outs.append(feats)
        return torch.cat(outs, dim=1)


class Mlp(nn.Module):
    """ReLU hidden layers, sigmoid output."""

    def __init__(self, widths: list[int], generator: torch.Generator | None = None):
        super().__init__()
        self.widths = list(widths)
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers.append(nn.Linear(a, b))
        self.layers = nn.ModuleList(layers)
        if generator is not None:
            for lin in self.layers:
                fan_in = lin.weight.shape[1]
                bound = 1.0 / np.sqrt(fan_in)
                lin.weight.data.uniform_(-bound, bound, generator=generator)
                lin.bias.data.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = torch.relu(lin(x))
        return torch.sigmoid(self.layers[-1](x))

    def load_arrays(self, weights: list[np.ndarray], biases: list[np.ndarray]) -> None:
        with torch.no_grad():
            for lin, w, b in zip(self.layers, weights, biases):
                lin.weight.copy_(torch.as_tensor(np.asarray(w)))
                lin.bias.copy_(torch.as_tensor(np.asarray(b)))

    def export_arrays(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws = [lin.weight.detach().cpu().numpy().astype(np.float32) for lin in self.layers]
        bs = [lin.bias.detach().cpu().numpy().astype(np.float32) for lin in self.layers]
        return ws, bs


NETWORK_NAMES = ("opacity", "feature", "color")


class FieldSet(nn.Module):
    """The three networks plus their encoders and freeze flags."""

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        gen = torch.Generator().manual_seed(self.cfg.seed)
        enc_cfg = self.cfg.encoder
        self.encoder_opacity = HashGridEncoder(enc_cfg, gen)
        self.encoder_feature = HashGridEncoder(enc_cfg, gen)
        hidden = [self.cfg.hidden_width] * self.cfg.hidden_layers
        self.mlp_opacity = Mlp([self.encoder_opacity.out_dim, *hidden, 1], gen)
        self.mlp_feature = Mlp([self.encoder_feature.out_dim, *hidden, FEATURE_DIM], gen)
        color_hidden = [self.cfg.color_hidden_width] * self.cfg.color_hidden_layers
        self.mlp_color = Mlp([COLOR_IN_DIM, *color_hidden, 3], gen)
        self.frozen: set[str] = set()
        self.clamp_tally = 0  # points clamped into [0,1]^3
        self.renorm_tally = 0  # directions renormalized to unit length

    def _prep_points(self, p: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(p).all():
            raise NeuralError("field input contains NaN/inf")
        clamped = p.clamp(0.0, 1.0)
        with torch.no_grad():
            n_out = int((clamped != p).any(dim=1).sum())
        if n_out:
            self.clamp_tally += n_out
        return clamped

    def forward_opacity(self, p: torch.Tensor) -> torch.Tensor:
        p = self._prep_points(p)
        return self.mlp_opacity(self.encoder_opacity(p))[:, 0]

    def forward_feature(self, p: torch.Tensor) -> torch.Tensor:
        p = self._prep_points(p)
        return self.mlp_feature(self.encoder_feature(p))

    def forward_color(self, f: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != FEATURE_DIM:
            raise NeuralError(f"feature dim must be {FEATURE_DIM}, got {f.shape[-1]}")
        norms = torch.linalg.norm(d, dim=-1, keepdim=True)
        off = (norms - 1.0).abs() > 1e-4
        if bool(off.any()):
            self.renorm_tally += int(off.sum())
            d = d / norms.clamp_min(1e-12)
        return self.mlp_color(torch.cat([f, d], dim=-1))

    def freeze(self, name: str) -> None:
        if name not in NETWORK_NAMES:
            raise NeuralError(f"unknown network {name!r}")
        self.frozen.add(name)
        for p in self._group(name):
            p.requires_grad_(False)

    def _group(self, name: str) -> list[nn.Parameter]:
        if name == "opacity":
            mods = [self.encoder_opacity, self.mlp_opacity]
        elif name == "feature":
            mods = [self.encoder_feature, self.mlp_feature]
        else:
            mods = [self.mlp_color]
        return [p for m in mods for p in m.parameters()]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- checkpoint I/O ------------------------------------------------------

    def save(self, json_path: str | Path, extra_meta: dict | None = None,
             extra_buffers: dict[str, np.ndarray] | None = None) -> None:
        buffers: dict[str, np.ndarray] = {}
        for key, tensor in self.state_dict().items():
            buffers[f"param/{key}"] = tensor.detach().cpu().numpy().astype("<f4")
        if extra_buffers:
            buffers.update(extra_buffers)
        meta = {
            "field_config": {
                "levels": self.cfg.encoder.levels,
                "features_per_entry": self.cfg.encoder.features_per_entry,
                "base_resolution": self.cfg.encoder.base_resolution,
                "finest_resolution": self.cfg.encoder.finest_resolution,
                "log2_table_size": self.cfg.encoder.log2_table_size,
                "hidden_width": self.cfg.hidden_width,
                "hidden_layers": self.cfg.hidden_layers,
                "color_hidden_width": self.cfg.color_hidden_width,
                "color_hidden_layers": self.cfg.color_hidden_layers,
                "seed": self.cfg.seed,
            },
            "frozen": sorted(self.frozen),
        }
        if extra_meta:
            meta.update(extra_meta)
        write_container(Path(json_path), CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta, buffers)

    @staticmethod
    def load(json_path: str | Path) -> tuple["FieldSet", dict, dict[str, np.ndarray]]:
        meta, buffers = read_container(Path(json_path), CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
        fc = meta["field_config"]
        cfg = FieldConfig(
            encoder=EncoderConfig(
                levels=fc["levels"],
                features_per_entry=fc["features_per_entry"],
                base_resolution=fc["base_resolution"],
                finest_resolution=fc["finest_resolution"],
                log2_table_size=fc["log2_table_size"],
            ),
            hidden_width=fc["hidden_width"],
            hidden_layers=fc["hidden_layers"],
            color_hidden_width=fc["color_hidden_width"],
            color_hidden_layers=fc["color_hidden_layers"],
            seed=fc["seed"],
        )
        fields = FieldSet(cfg)
        state = {
            key[len("param/") :]: torch.as_tensor(arr)
            for key, arr in buffers.items()
            if key.startswith("param/")
        }
        fields.load_state_dict(state)
        for name in meta.get("frozen", []):
            fields.freeze(name)
        extra = {k: v for k, v in buffers.items() if not k.startswith("param/")}
        return fields, meta, extra


def backward(loss: torch.Tensor, adjoint: torch.Tensor | None = None) -> None:
    """Reverse-mode sweep; requires a recorded forward."""
    if loss.grad_fn is None and not loss.requires_grad:
        raise NeuralError("backward called with no recorded forward computation")
    loss.backward(gradient=adjoint)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_state_for(params: list[torch.Tensor], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[torch.zeros_like(p) for p in params],
        v=[torch.zeros_like(p) for p in params],
        step=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor | None],
    state: AdamState,
    names: list[str] | None = None,
) -> list[torch.Tensor]:
    """Standard bias-corrected Adam, in place on `params`."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                # moments still decay so skipped tensors behave like g = 0
                state.m[i].mul_(state.beta1)
                state.v[i].mul_(state.beta2)
                continue
            if not torch.isfinite(g).all():
                label = names[i] if names else f"tensor {i}"
                raise NeuralError(f"NaN/inf gradient in {label}")
            state.m[i].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[i].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = state.m[i] / bc1
            v_hat = state.v[i] / bc2
            p.add_(-state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return params
