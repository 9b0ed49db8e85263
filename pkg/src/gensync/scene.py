"""Canonical Gaussian cloud and the canonical network mapping features to attributes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import MLPParams, Tensor, add, clip, index, mlp_apply, normalize_rows, sigmoid, tanh
from .errors import ContractError

REGIONS = ("face", "mouth", "eye_left", "eye_right")
FACE, MOUTH, EYE_LEFT, EYE_RIGHT = range(4)
TEMPLATE_FRACTIONS = {MOUTH: 0.1, EYE_LEFT: 0.1, EYE_RIGHT: 0.1}

POSITION_BOUND = 1.5
N_CANONICAL_OUT = 11  # color 3, opacity 1, log-scale 3, rotation 4
LOG_SCALE_OFFSET = float(np.log(0.05))
ROTATION_OFFSET = np.array([1.0, 0.0, 0.0, 0.0])
LOG_SCALE_MIN = float(np.log(1.0001e-4))
LOG_SCALE_MAX = float(np.log(0.9999))

# Stylized face used by both the template layout and the synthetic corpus,
# in units of the head radius.
EYE_OFFSET = (0.42, 0.22)
MOUTH_HEIGHT = -0.42
HEAD_ASPECT = 1.2
FEATURE_DEPTH = -0.05


@dataclass
class GaussianCloud:
    positions: Tensor
    features: Tensor
    fc: MLPParams
    region_tags: np.ndarray

    def __post_init__(self):
        self.region_tags = np.asarray(self.region_tags, dtype=np.int64)
        self.region_tags.setflags(write=False)
        if self.region_tags.shape != (self.positions.shape[0],):
            raise ContractError("region_tags must have one entry per Gaussian")
        if self.features.shape[0] != self.positions.shape[0] or self.features.shape[1] < 1:
            raise ContractError("features must be N_g x d_f with d_f >= 1")

    @property
    def count(self):
        return self.positions.shape[0]

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def parameters(self):
        return [self.positions, self.features] + self.fc.parameters()

    def named_parameters(self, prefix):
        out = {f"{prefix}/positions": self.positions, f"{prefix}/features": self.features}
        out.update(self.fc.named_parameters(f"{prefix}/fc"))
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def clamp_positions(self):
        np.clip(self.positions.data, -POSITION_BOUND, POSITION_BOUND, out=self.positions.data)

    def permuted(self, perm):
        """A copy with Gaussians reordered by ``perm``; F_c is shared."""
        perm = np.asarray(perm)
        return GaussianCloud(
            Tensor(self.positions.data[perm], True), Tensor(self.features.data[perm], True),
            self.fc, self.region_tags[perm])


@dataclass
class CanonicalAttributes:
    colors: Tensor
    opacity_logits: Tensor
    opacities: Tensor
    log_scales: Tensor
    rotations_raw: Tensor
    rotations: Tensor


def template_tags(n):
    counts = {k: int(np.floor(n * f)) for k, f in TEMPLATE_FRACTIONS.items()}
    counts[FACE] = n - sum(counts.values())
    return np.concatenate([np.full(counts[k], k) for k in (FACE, MOUTH, EYE_LEFT, EYE_RIGHT)]).astype(np.int64)


def _sunflower(k, rng):
    idx = np.arange(k) + 0.5
    r = np.sqrt(idx / max(k, 1))
    theta = idx * np.pi * (3.0 - np.sqrt(5.0)) + rng.uniform(0, 2 * np.pi)
    return r * np.cos(theta), r * np.sin(theta)


def face_template_positions(tags, rng, radius=0.5):
    pos = np.zeros((tags.size, 3))
    rx, ry = radius, radius * HEAD_ASPECT
    face = tags == FACE
    x, y = _sunflower(int(face.sum()), rng)
    pos[face] = np.stack([0.97 * rx * x, 0.97 * ry * y, np.zeros_like(x)], axis=1)
    for tag, side in ((EYE_LEFT, -1.0), (EYE_RIGHT, 1.0)):
        sel = tags == tag
        x, y = _sunflower(int(sel.sum()), rng)
        pos[sel] = np.stack([side * EYE_OFFSET[0] * rx + 0.12 * rx * x,
                             EYE_OFFSET[1] * ry + 0.06 * ry * y,
                             np.full_like(x, FEATURE_DEPTH)], axis=1)
    sel = tags == MOUTH
    k = int(sel.sum())
    pos[sel] = np.stack([np.linspace(-0.3 * rx, 0.3 * rx, k),
                         MOUTH_HEIGHT * ry + rng.normal(0, 0.01, k),
                         np.full(k, FEATURE_DEPTH)], axis=1)
    return pos


def init_cloud(n, seed, layout="face_template", feature_dim=32, hidden=64, zero_final=False):
    """Deterministic cloud for fixed (n, seed, layout)."""
    if n < 1:
        raise ContractError(f"a cloud needs at least one Gaussian, got n={n}")
    if layout not in ("random", "face_template"):
        raise ContractError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    if layout == "random":
        tags = np.zeros(n, dtype=np.int64)
        pos = rng.uniform(-1.0, 1.0, (n, 3))
    else:
        tags = template_tags(n)
        pos = face_template_positions(tags, rng)
    feats = rng.normal(0.0, 0.1, (n, feature_dim))
    bias = np.zeros(N_CANONICAL_OUT)
    bias[3] = 2.0  # start mostly opaque
    fc = MLPParams.init([feature_dim, hidden, N_CANONICAL_OUT], rng, zero_final=zero_final,
                        final_bias=None if zero_final else bias, final_std=0.01)
    return GaussianCloud(Tensor(pos, True), Tensor(feats, True), fc, tags)


def normalize_rotations(raw):
    """Unit quaternions from raw 4-vectors; gradients flow through the norm."""
    return normalize_rows(raw)


def canonical_attributes(cloud):
    out = mlp_apply(cloud.fc, cloud.features)
    cols = lambda a, b: index(out, (slice(None), slice(a, b)))
    colors = (tanh(cols(0, 3)) + 1.0) * 0.5
    opacity_logits = cols(3, 4)
    log_scales = clip(add(cols(4, 7), LOG_SCALE_OFFSET), LOG_SCALE_MIN, LOG_SCALE_MAX)
    rotations_raw = add(cols(7, 11), ROTATION_OFFSET)
    return CanonicalAttributes(
        colors=colors,
        opacity_logits=opacity_logits,
        opacities=sigmoid(opacity_logits),
        log_scales=log_scales,
        rotations_raw=rotations_raw,
        rotations=normalize_rotations(rotations_raw),
    )
