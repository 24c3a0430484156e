"""Vector-neuron module: lift scalar features to 3D vector features and mix them equivariantly.

Vector features are (batch, rows, 3) arrays whose rows are 3D vectors. Every
layer after the lift commutes with right-multiplication of the rows by a
rotation matrix; the lift itself is an ordinary affine map and is not
equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import Module


@dataclass
class VNConfig:
    d_in: int = 1024
    d_lift: int = 128
    n_vn_layers: int = 2
    d_out: int = 128

    def validate(self):
        if min(self.d_in, self.d_lift, self.d_out) < 1 or self.n_vn_layers < 0:
            raise ValueError(f"invalid VN configuration {self}")
        return self


def lift(s: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """(B, d_in) -> (B, d_lift, 3) through a linear map to 3 * d_lift outputs."""
    out = ad.linear(s, weight, bias)
    return ad.reshape(out, (s.shape[0], weight.shape[0] // 3, 3))


def vn_linear(V: Tensor, W: Tensor) -> Tensor:
    """Mix rows: W (d_out, d_in) applied to V (..., d_in, 3)."""
    if V.shape[-2] != W.shape[1] or V.shape[-1] != 3:
        raise ad.ShapeError(f"vn_linear: V {V.shape} vs W {W.shape}")
    return ad.matmul(W, V)


def vn_nonlinearity(V: Tensor, U: Tensor, K: Tensor) -> Tensor:
    return ad.vn_relu(vn_linear(V, U), vn_linear(V, K))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class VNLayer(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = Parameter(_uniform(rng, (d_out, d_in), d_in), f"{name}.W")
        self.U = Parameter(_uniform(rng, (d_out, d_out), d_out), f"{name}.U")
        self.K = Parameter(_uniform(rng, (d_out, d_out), d_out), f"{name}.K")

    def own_parameters(self):
        return [self.W, self.U, self.K]

    def __call__(self, V: Tensor) -> Tensor:
        return vn_nonlinearity(vn_linear(V, self.W), self.U, self.K)


class VNModule(Module):
    """lift -> (vn_linear -> vn_nonlinearity) x n_vn_layers -> vn_linear to d_out rows."""

    def __init__(self, cfg: VNConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(cfg.d_in)
        self.lift_w = Parameter(rng.uniform(-bound, bound, (3 * cfg.d_lift, cfg.d_in)).astype(np.float32),
                                "vn.lift.weight")
        self.lift_b = Parameter(np.zeros(3 * cfg.d_lift, np.float32), "vn.lift.bias")
        self.layers = [VNLayer(f"vn.layer{i}", cfg.d_lift, cfg.d_lift, rng)
                       for i in range(1, cfg.n_vn_layers + 1)]
        self.out_w = Parameter(_uniform(rng, (cfg.d_out, cfg.d_lift), cfg.d_lift), "vn.out.W")

    def own_parameters(self):
        return [self.lift_w, self.lift_b, self.out_w]

    def children(self):
        return ((f"layer{i}", layer) for i, layer in enumerate(self.layers, 1))

    def stack(self, V: Tensor) -> Tensor:
        """Everything after the lift; exactly rotation-equivariant."""
        for layer in self.layers:
            V = layer(V)
        return vn_linear(V, self.out_w)

    def __call__(self, s: Tensor) -> Tensor:
        return vn_forward(self, s)


def vn_forward(vn: VNModule, s: Tensor) -> Tensor:
    if s.ndim != 2 or s.shape[1] != vn.cfg.d_in:
        raise ad.ShapeError(f"VN input must be (B, {vn.cfg.d_in}), got {s.shape}")
    return vn.stack(lift(s, vn.lift_w, vn.lift_b))
