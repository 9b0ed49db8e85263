"""Cross-attention from canonical Gaussian features onto frame-condition tokens,
and the deformation MLP that turns the fused embedding into attribute offsets.

Keys and values are the same three tokens, one per conditioning source:
the disentangled audio-identity vector, the eye feature and the viewpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MLPParams, Tensor, add, clip, index, matmul, mlp_apply, normalize_rows, sigmoid, softmax_rows, stack,
)
from .errors import ContractError, DimensionError

N_OFFSETS = 11  # position 3, rotation 4, log-scale 3, opacity-logit 1
MAX_POSITION_OFFSET = 0.5


@dataclass
class FrameCondition:
    m: Tensor
    e: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (np.all(np.isfinite(self.e)) and np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.m.data))):
            raise ContractError("frame condition must be finite")
        if np.any(self.e < 0) or np.any(self.e > 1):
            raise ContractError(f"eye features must lie in [0, 1], got {self.e}")
        if abs(self.v[0]) > np.pi or abs(self.v[1]) > np.pi / 2:
            raise ContractError(f"viewpoint out of range: {self.v}")


@dataclass
class AttentionParams:
    P_q: Tensor  # d x d_f
    P_m: Tensor  # d x d_m
    P_e: Tensor  # d x d_e
    P_v: Tensor  # d x d_v

    def __post_init__(self):
        widths = {t.shape[0] for t in (self.P_q, self.P_m, self.P_e, self.P_v)}
        if len(widths) != 1:
            raise DimensionError(f"projectors disagree on the attention width: {sorted(widths)}")

    @classmethod
    def init(cls, rng, d_f=32, d_m=32, d_e=2, d_v=2, d=32):
        def mat(cols):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(cols), (d, cols)), requires_grad=True)

        return cls(mat(d_f), mat(d_m), mat(d_e), mat(d_v))

    @property
    def width(self):
        return self.P_q.shape[0]

    def named_parameters(self, prefix="attention"):
        return {f"{prefix}/{k}": getattr(self, k) for k in ("P_q", "P_m", "P_e", "P_v")}

    def parameters(self):
        return list(self.named_parameters().values())


@dataclass
class FusedEmbedding:
    h: Tensor
    weights: Tensor


@dataclass
class Deformation:
    d_position: Tensor
    d_rotation: Tensor
    d_log_scale: Tensor
    d_opacity_logit: Tensor

    @classmethod
    def zeros(cls, n):
        return cls(Tensor(np.zeros((n, 3))), Tensor(np.zeros((n, 4))),
                   Tensor(np.zeros((n, 3))), Tensor(np.zeros((n, 1))))


@dataclass
class DeformedGaussians:
    positions: Tensor
    rotations: Tensor
    log_scales: Tensor
    opacities: Tensor
    colors: Tensor


def init_deformation_mlp(rng, d=32, hidden=64):
    return MLPParams.init([d, hidden, N_OFFSETS], rng, zero_final=True)


def build_condition_tokens(cond, p):
    """3 x d token matrix serving as both keys and values."""
    for proj, x, name in ((p.P_m, cond.m.data, "m"), (p.P_e, cond.e, "e"), (p.P_v, cond.v, "v")):
        if x.shape != (proj.shape[1],):
            raise DimensionError(f"{name} has shape {x.shape}, projector expects ({proj.shape[1]},)")
    return stack([matmul(p.P_m, cond.m), matmul(p.P_e, Tensor(cond.e)), matmul(p.P_v, Tensor(cond.v))])


def spatial_audio_attention(features, tokens, p):
    """softmax(Q K^T / sqrt(d)) V with Q = features P_q^T and K = V = tokens."""
    d = p.width
    if d == 0:
        raise ContractError("attention width must be positive")
    if features.shape[1] != p.P_q.shape[1] or tokens.shape[1] != d:
        raise DimensionError(
            f"features {features.shape} / tokens {tokens.shape} incompatible with P_q {p.P_q.shape}")
    q = matmul(features, p.P_q.T)
    weights = softmax_rows(matmul(q, tokens.T) * (1.0 / np.sqrt(d)))
    return FusedEmbedding(matmul(weights, tokens), weights)


def deformation_offsets(h, f_d):
    out = mlp_apply(f_d, h.h if isinstance(h, FusedEmbedding) else h)
    cols = lambda a, b: index(out, (slice(None), slice(a, b)))
    return Deformation(
        d_position=clip(cols(0, 3), -MAX_POSITION_OFFSET, MAX_POSITION_OFFSET),
        d_rotation=cols(3, 7),
        d_log_scale=cols(7, 10),
        d_opacity_logit=cols(10, 11),
    )


def apply_deformation(cloud, attrs, deform):
    """Offset the canonical attributes; colors pass through unchanged.

    The rotation offset is added to the pre-normalization quaternion so that a
    zero offset reproduces the canonical rotation bit for bit.
    """
    n = cloud.count
    if deform.d_position.shape[0] != n or attrs.colors.shape[0] != n:
        raise DimensionError("cloud, attributes and deformation disagree on N_g")
    return DeformedGaussians(
        positions=add(cloud.positions, deform.d_position),
        rotations=normalize_rows(add(attrs.rotations_raw, deform.d_rotation)),
        log_scales=add(attrs.log_scales, deform.d_log_scale),
        opacities=sigmoid(add(attrs.opacity_logits, deform.d_opacity_logit)),
        colors=attrs.colors,
    )


def canonical_gaussians(cloud, attrs):
    return DeformedGaussians(cloud.positions, attrs.rotations, attrs.log_scales, attrs.opacities, attrs.colors)
