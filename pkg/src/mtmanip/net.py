"""Shared-trunk network with grasp, siamese push and poke heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor
from .errors import ContractError, DimensionError

GRASP_ANGLES = 18
PUSH_DIMS = 5
POKE_DIMS = 2


def _parse_fraction(value) -> Fraction:
    frac = Fraction(str(value)) if not isinstance(value, Fraction) else value
    if frac <= 0:
        raise ContractError(f"width_scale must be positive, got {value}")
    return frac


@dataclass(frozen=True)
class NetConfig:
    input_side: int = 64
    conv_channels: Tuple[int, int, int] = (96, 256, 128)
    conv_kernels: Tuple[int, int, int] = (11, 11, 5)
    conv_strides: Tuple[int, int, int] = (3, 1, 1)
    conv_pads: Tuple[int, int, int] = (2, 0, 0)
    push_conv_channels: int = 128
    push_conv_kernel: int = 5
    grasp_hidden: Tuple[int, int] = (512, 512)
    push_hidden: int = 128
    poke_hidden: Tuple[int, int] = (128, 128)
    dropout: float = 0.5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    width_scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        object.__setattr__(self, "width_scale", _parse_fraction(self.width_scale))
        for name in ("conv_channels", "conv_kernels", "conv_strides", "conv_pads", "grasp_hidden", "poke_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.trunk_sizes()  # raises GeometryError for non-integral layouts

    def scaled(self, n: int) -> int:
        return max(1, math.floor(n * self.width_scale + Fraction(1, 2)))

    def trunk_sizes(self) -> Tuple[int, int, int]:
        side = self.input_side
        sizes = []
        for k, s, p in zip(self.conv_kernels, self.conv_strides, self.conv_pads):
            side = ad.conv_output_size(side, k, s, p)
            sizes.append(side)
        return tuple(sizes)

    @property
    def trunk_channels(self) -> Tuple[int, int, int]:
        return tuple(self.scaled(c) for c in self.conv_channels)

    @property
    def push_conv_side(self) -> int:
        return ad.conv_output_size(self.trunk_sizes()[-1], self.push_conv_kernel, 1, 0)

    @property
    def trunk_features(self) -> int:
        return self.trunk_channels[-1] * self.trunk_sizes()[-1] ** 2

    def layer_shapes(self) -> Dict[str, Dict[str, tuple]]:
        """Parameter shapes by group: trunk, grasp, push, poke."""
        c1, c2, c3 = self.trunk_channels
        cin = (3, c1, c2)
        trunk: Dict[str, tuple] = {}
        for i, (cout, ci, k) in enumerate(zip((c1, c2, c3), cin, self.conv_kernels), start=1):
            trunk[f"conv{i}.weight"] = (cout, ci, k, k)
            trunk[f"conv{i}.bias"] = (cout,)
            trunk[f"bn{i}.gamma"] = (cout,)
            trunk[f"bn{i}.beta"] = (cout,)
        g1, g2 = (self.scaled(h) for h in self.grasp_hidden)
        feat = self.trunk_features
        grasp = _fc_shapes("gr_fc", (feat, g1, g2, GRASP_ANGLES))
        pc = self.scaled(self.push_conv_channels)
        kp = self.push_conv_kernel
        ph = self.scaled(self.push_hidden)
        push = {"pu_conv1.weight": (pc, c3, kp, kp), "pu_conv1.bias": (pc,)}
        push.update(_fc_shapes("pu_fc", (2 * pc * self.push_conv_side ** 2, ph, PUSH_DIMS)))
        k1, k2 = (self.scaled(h) for h in self.poke_hidden)
        poke = _fc_shapes("po_fc", (feat, k1, k2, POKE_DIMS))
        return {"trunk": trunk, "grasp": grasp, "push": push, "poke": poke}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["width_scale"] = str(self.width_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["width_scale"] = Fraction(d["width_scale"])
        return cls(**d)


def _fc_shapes(prefix: str, widths: tuple) -> Dict[str, tuple]:
    out = {}
    for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        out[f"{prefix}{i}.weight"] = (dout, din)
        out[f"{prefix}{i}.bias"] = (dout,)
    return out


GROUPS = ("trunk", "grasp", "push", "poke")


@dataclass
class ParamGroups:
    """W_S (trunk), W_G (grasp), W_P (push) and W_Poke (poke) parameter sets."""

    trunk: Dict[str, Tensor]
    grasp: Dict[str, Tensor]
    push: Dict[str, Tensor]
    poke: Dict[str, Tensor]

    def group(self, name: str) -> Dict[str, Tensor]:
        return getattr(self, name)

    def items(self) -> Iterator[Tuple[str, str, Tensor]]:
        """Yield ``(group, name, tensor)`` in a fixed order."""
        for g in GROUPS:
            for name, t in self.group(g).items():
                yield g, name, t

    def all(self) -> Dict[str, Tensor]:
        return {name: t for _, name, t in self.items()}

    def zero_grad(self) -> None:
        for _, _, t in self.items():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for _, _, t in self.items())


def init_params(config: NetConfig, seed: int) -> ParamGroups:
    """He-normal weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    groups = {}
    for gname, shapes in config.layer_shapes().items():
        tensors = {}
        for name, shape in shapes.items():
            if name.endswith(".weight"):
                fan_in = int(np.prod(shape[1:]))
                data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        groups[gname] = tensors
    return ParamGroups(**groups)


def _as_input(x, side: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 4:
        raise DimensionError(f"{what}: expected a 4-D (N,3,{side},{side}) batch, got rank {t.ndim}")
    if t.shape[1] != 3:
        raise DimensionError(f"{what}: channel axis (1) is {t.shape[1]}, expected 3")
    if t.shape[2] != side:
        raise DimensionError(f"{what}: height axis (2) is {t.shape[2]}, expected {side}")
    if t.shape[3] != side:
        raise DimensionError(f"{what}: width axis (3) is {t.shape[3]}, expected {side}")
    return t


class MultiTaskNet:
    """The three-headed network. Parameters live in ``self.params``; BN running
    statistics in ``self.bn_stats``.

    Every forward takes ``training``; in training mode dropout needs ``rng``.
    """

    def __init__(self, config: Optional[NetConfig] = None, seed: int = 0,
                 params: Optional[ParamGroups] = None):
        self.config = config or NetConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        c = self.config
        self.bn_stats = {
            f"bn{i}": BatchNormStats(ch, momentum=c.bn_momentum, eps=c.bn_eps)
            for i, ch in enumerate(c.trunk_channels, start=1)
        }

    # -- building blocks --------------------------------------------------

    def trunk(self, x: Tensor, training: bool) -> Tensor:
        p = self.params.trunk
        c = self.config
        h = x
        for i in range(1, 4):
            h = ad.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"],
                          stride=c.conv_strides[i - 1], pad=c.conv_pads[i - 1])
            h = ad.batch_norm(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn_stats[f"bn{i}"], training)
            h = ad.relu(h)
        return h

    def _mlp(self, h: Tensor, params: Dict[str, Tensor], prefix: str, n_layers: int,
             training: bool, rng) -> Tensor:
        for i in range(1, n_layers + 1):
            h = ad.fully_connected(h, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"])
            if i < n_layers:
                h = ad.dropout(h, self.config.dropout, training, rng)
                h = ad.relu(h)
        return h

    # -- task heads ------------------------------------------------------------

    def grasp_forward(self, patch, training: bool = False, rng=None) -> Tensor:
        """Pre-sigmoid scores, one per 10-degree grasp angle bin: shape (N, 18)."""
        x = _as_input(patch, self.config.input_side, "grasp patch")
        feat = ad.flatten(self.trunk(x, training))
        return self._mlp(feat, self.params.grasp, "gr_fc", 3, training, rng)

    def push_tower(self, image: Tensor, training: bool) -> Tensor:
        p = self.params.push
        h = self.trunk(image, training)
        h = ad.relu(ad.conv2d(h, p["pu_conv1.weight"], p["pu_conv1.bias"]))
        return ad.flatten(h)

    def push_forward(self, begin, end, training: bool = False, rng=None) -> Tensor:
        """Predicted push action (x_start, y_start, x_final, y_final, z): shape (N, 5)."""
        side = self.config.input_side
        b = _as_input(begin, side, "push begin image")
        e = _as_input(end, side, "push end image")
        if b.shape[0] != e.shape[0]:
            raise DimensionError(f"push: batch axis (0) differs, begin {b.shape[0]} vs end {e.shape[0]}")
        h = ad.concat([self.push_tower(b, training), self.push_tower(e, training)], axis=1)
        return self._mlp(h, self.params.push, "pu_fc", 2, training, rng)

    def poke_forward(self, image, training: bool = False, rng=None) -> Tensor:
        """Predicted poke response (slope, intercept): shape (N, 2)."""
        x = _as_input(image, self.config.input_side, "poke image")
        feat = ad.flatten(self.trunk(x, training))
        return self._mlp(feat, self.params.poke, "po_fc", 3, training, rng)

    # -- bookkeeping -------------------------------------------------------------

    def parameter_audit(self) -> list:
        """Rows of (group, layer, actual count, closed-form count)."""
        rows = []
        for gname, shapes in self.config.layer_shapes().items():
            for layer in dict.fromkeys(n.split(".")[0] for n in shapes):
                actual = sum(self.params.group(gname)[n].size for n in shapes if n.startswith(layer + "."))
                w = shapes.get(f"{layer}.weight")
                if w is not None and len(w) == 4:
                    k, c, kh, kw = w
                    expected = k * c * kh * kw + k
                elif w is not None:
                    m, d = w
                    expected = m * d + m
                else:
                    expected = 2 * shapes[f"{layer}.gamma"][0]
                rows.append((gname, layer, actual, expected))
        return rows
