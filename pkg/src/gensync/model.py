"""The shared multi-identity deformation model.

Per identity: a canonical cloud (positions, features, canonical network) and
an identity vector. Shared across identities: the disentanglement matrices,
the attention projectors and the deformation MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams, Deformation, FrameCondition, apply_deformation, build_condition_tokens,
    canonical_gaussians, deformation_offsets, init_deformation_mlp, spatial_audio_attention,
)
from .autodiff import MLPParams, Tensor
from .disentangle import DisentangleParams, IdentityTable, disentangle, lookup_identity
from .errors import UnknownIdentityError
from .render import Camera, render
from .scene import canonical_attributes, init_cloud


@dataclass
class ModelConfig:
    n_gaussians: int = 300
    feature_dim: int = 32
    canonical_hidden: int = 64
    audio_dim: int = 16
    identity_dim: int = 8
    hidden_dim: int = 32
    condition_dim: int = 32
    eye_dim: int = 2
    view_dim: int = 2
    attention_dim: int = 32
    deform_hidden: int = 64
    image_size: int = 64
    camera_scale: float = 1.0


@dataclass
class FrameOutput:
    image: Tensor
    deformation: Deformation
    attention_weights: Tensor
    positions: Tensor


@dataclass
class GenSyncModel:
    config: ModelConfig
    disentangle: DisentangleParams
    attention: AttentionParams
    f_d: MLPParams
    identities: IdentityTable
    clouds: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config, seed):
        rng = np.random.default_rng(seed)
        c = config
        return cls(
            config=c,
            disentangle=DisentangleParams.init(rng, c.audio_dim, c.identity_dim, c.hidden_dim, c.condition_dim),
            attention=AttentionParams.init(rng, c.feature_dim, c.condition_dim, c.eye_dim, c.view_dim,
                                           c.attention_dim),
            f_d=init_deformation_mlp(rng, c.attention_dim, c.deform_hidden),
            identities=IdentityTable(c.identity_dim),
        )

    def add_identity(self, label, seed, cloud=None, vector=None):
        rng = np.random.default_rng(seed)
        if cloud is None:
            cloud = init_cloud(self.config.n_gaussians, seed, "face_template",
                               self.config.feature_dim, self.config.canonical_hidden)
        self.clouds[label] = cloud
        self.identities.register(label, rng=rng, vector=vector)

    @property
    def labels(self):
        return list(self.clouds)

    def cloud(self, label):
        if label not in self.clouds:
            raise UnknownIdentityError(label, self.clouds)
        return self.clouds[label]

    def camera(self, viewpoint=(0.0, 0.0)):
        s = self.config.image_size
        return Camera(float(viewpoint[0]), float(viewpoint[1]), self.config.camera_scale, s, s)

    # ------------------------------------------------------------ forward

    def condition(self, audio, identity_vector, eye, viewpoint):
        m = disentangle(audio, identity_vector, self.disentangle)
        return FrameCondition(m, eye, viewpoint)

    def forward_frame(self, label, audio, eye, viewpoint, identity=None, render_image=True):
        """Deform ``label``'s canonical face for one frame and render it.

        ``identity`` overrides whose identity vector drives the deformation.
        """
        cloud = self.cloud(label)
        ivec = lookup_identity(self.identities, label if identity is None else identity)
        attrs = canonical_attributes(cloud)
        cond = self.condition(audio, ivec, eye, viewpoint)
        tokens = build_condition_tokens(cond, self.attention)
        fused = spatial_audio_attention(cloud.features, tokens, self.attention)
        deform = deformation_offsets(fused, self.f_d)
        g = apply_deformation(cloud, attrs, deform)
        image = None
        if render_image:
            image = render(g.positions, g.rotations, g.log_scales, g.opacities, g.colors, self.camera(viewpoint))
        return FrameOutput(image, deform, fused.weights, g.positions)

    def canonical_render(self, label, viewpoint=(0.0, 0.0)):
        cloud = self.cloud(label)
        g = canonical_gaussians(cloud, canonical_attributes(cloud))
        return render(g.positions, g.rotations, g.log_scales, g.opacities, g.colors, self.camera(viewpoint))

    # ------------------------------------------------------------ parameters

    def shared_named_parameters(self):
        out = {}
        out.update(self.disentangle.named_parameters("disentangle"))
        out.update(self.attention.named_parameters("attention"))
        out.update(self.f_d.named_parameters("fd"))
        return out

    def identity_named_parameters(self, label):
        out = self.cloud(label).named_parameters(f"cloud/{label}")
        out[f"identity/{label}"] = lookup_identity(self.identities, label)
        return out

    def named_parameters(self):
        out = self.shared_named_parameters()
        for label in self.labels:
            out.update(self.identity_named_parameters(label))
        return out

    def shared_parameter_count(self):
        return sum(p.size for p in self.shared_named_parameters().values())

    def identity_parameter_count(self, label):
        return sum(p.size for p in self.identity_named_parameters(label).values())

    def parameter_count(self):
        return sum(p.size for p in self.named_parameters().values())
