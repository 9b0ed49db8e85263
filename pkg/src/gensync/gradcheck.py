"""End-to-end finite-difference check of the whole deformation pipeline."""

from __future__ import annotations

import numpy as np

from .autodiff import grad_check_groups
from .model import GenSyncModel, ModelConfig
from .render import image_loss
from .scene import init_cloud

TOLERANCE = 1e-4


def gradcheck_scene(seed=0, n_gaussians=8, image_size=16):
    """A tiny model with a non-zero deformation MLP, one identity and one frame."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_gaussians=n_gaussians, image_size=image_size, feature_dim=8, canonical_hidden=16,
                      hidden_dim=8, condition_dim=8, attention_dim=8, deform_hidden=16)
    model = GenSyncModel.init(cfg, seed)
    for W in model.f_d.weights[-1:]:
        W.data[...] = rng.normal(0.0, 0.3, W.shape)
    cloud = init_cloud(n_gaussians, seed, "face_template", cfg.feature_dim, cfg.canonical_hidden)
    # unit-scale features keep attention away from uniform, so no gradient sits at roundoff level
    cloud.features.data[...] = rng.normal(0.0, 1.0, cloud.features.shape)
    model.add_identity("A", seed, cloud=cloud)
    model.identities.vectors["A"].data[...] = rng.normal(0.0, 0.5, cfg.identity_dim)
    frame = {
        "audio": rng.uniform(0.0, 1.0, cfg.audio_dim),
        "eye": rng.uniform(0.0, 1.0, cfg.eye_dim),
        "viewpoint": (0.2, 0.1),
    }
    target = rng.uniform(0.2, 0.8, (image_size, image_size, 3))
    return model, frame, target


def parameter_groups(model, label="A"):
    d, a, c = model.disentangle, model.attention, model.cloud(label)
    return {
        "U1": [d.U1], "U2": [d.U2], "C": [d.C], "W2": [d.W2], "W3": [d.W3],
        "identity": [model.identities.vectors[label]],
        "features": [c.features],
        "F_c": c.fc.parameters(),
        "projectors": [a.P_q, a.P_m, a.P_e, a.P_v],
        "F_d": model.f_d.parameters(),
        "positions": [c.positions],
    }


def pipeline_gradcheck(full=False, seed=0, step=1e-5):
    """Worst relative error per parameter group.

    The quick mode samples 6 coordinates per tensor; ``full`` checks every coordinate.
    """
    model, frame, target = gradcheck_scene(seed)

    def f():
        out = model.forward_frame("A", frame["audio"], frame["eye"], frame["viewpoint"])
        return image_loss(out.image, target)

    return grad_check_groups(f, parameter_groups(model), step=step, max_coords=None if full else 6, seed=seed)
