"""Metrics and the identity-swap / cross-drive probes.

Lip sync is measured in Gaussian space: the aperture of a frame is the mean
downward displacement of the mouth-tagged Gaussians, compared against the
analytic ``gain * energy`` series of the synthetic corpus.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .errors import ContractError, DimensionError, UnknownIdentityError
from .render import export_frame
from .scene import MOUTH

EVAL_SCHEMA = "gensync-eval/1"
FRONTAL = (0.0, 0.0)
OPEN_EYES = (0.0, 0.0)


def psnr(a, b):
    """10 log10(1/MSE) over all channels; ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def pearson(x, y):
    """Return ``(r, degenerate)``; a constant series gives ``(0.0, True)``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs two equal-length series, got {x.shape} and {y.shape}")
    if x.size < 2:
        return 0.0, True
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r)), False


@dataclass
class SyncReport:
    label: str
    r: float
    amplitude: float
    degenerate: bool = False

    def __post_init__(self):
        if not -1.0 <= self.r <= 1.0:
            raise ContractError(f"correlation {self.r} outside [-1, 1]")
        if self.amplitude < 0:
            raise ContractError(f"negative amplitude {self.amplitude}")

    def to_dict(self):
        return {"identity": self.label, "r": self.r, "amplitude": self.amplitude,
                "degenerate": self.degenerate}


def _model(obj):
    return getattr(obj, "model", obj)


def _mouth_aperture(model, label, d_position):
    mask = model.cloud(label).region_tags == MOUTH
    if not mask.any():
        raise ContractError(f"identity {label!r} has no mouth-tagged Gaussians")
    return float(-d_position[mask, 1].mean())


def predicted_aperture(model, label, audio, eye=OPEN_EYES, viewpoint=FRONTAL, identity=None):
    """Mean downward offset of ``label``'s mouth Gaussians for one frame condition."""
    model = _model(model)
    with no_grad():
        out = model.forward_frame(label, audio, eye, viewpoint, identity=identity, render_image=False)
    return _mouth_aperture(model, label, out.deformation.d_position.data)


def sync_report(label, predicted, oracle):
    r, degenerate = pearson(predicted, oracle)
    predicted = np.asarray(predicted)
    return SyncReport(label, r, float(predicted.max() - predicted.min()), degenerate)


def _check_audio(model, embedding):
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 2 or embedding.shape[1] != model.config.audio_dim:
        raise DimensionError(
            f"audio track has shape {embedding.shape}, model expects (T, {model.config.audio_dim})")
    return embedding


def drive(model, label, embedding, eyes=None, views=None, identity=None, render_frames=True):
    """Run a whole track; returns (aperture series, list of images or None)."""
    model = _model(model)
    embedding = _check_audio(model, embedding)
    T = embedding.shape[0]
    eyes = np.zeros((T, model.config.eye_dim)) if eyes is None else np.asarray(eyes)
    views = np.zeros((T, model.config.view_dim)) if views is None else np.asarray(views)
    apertures, frames = np.empty(T), []
    with no_grad():
        for n in range(T):
            out = model.forward_frame(label, embedding[n], eyes[n], views[n], identity=identity,
                                      render_image=render_frames)
            apertures[n] = _mouth_aperture(model, label, out.deformation.d_position.data)
            if render_frames:
                frames.append(out.image.data)
    return apertures, (frames if render_frames else None)


def export_sequence(frames, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create output directory: {exc.strerror}", str(out)) from exc
    paths = []
    for n, img in enumerate(frames):
        p = out / f"frame_{n:04d}.ppm"
        export_frame(img, p)
        paths.append(p)
    return paths


@dataclass
class SwapResult:
    own: SyncReport
    swapped: SyncReport
    own_frames: list = field(repr=False, default_factory=list)
    swapped_frames: list = field(repr=False, default_factory=list)

    @property
    def amplitude_ratio(self):
        if self.own.amplitude == 0.0:
            return math.inf if self.swapped.amplitude > 0 else 1.0
        return self.swapped.amplitude / self.own.amplitude


def swap_identities(model, source, target, audio, out_dir=None, render_frames=True):
    """Render ``target`` with its own identity vector and with ``source``'s."""
    model = _model(model)
    if source == target:
        raise ContractError(f"swapping {source!r} with itself is vacuous")
    for label in (source, target):
        if label not in model.clouds:
            raise UnknownIdentityError(label, model.clouds)
    oracle = model.gains.get(target, 1.0) * np.asarray(audio.energy)
    own_ap, own_frames = drive(model, target, audio.embedding, render_frames=render_frames)
    sw_ap, sw_frames = drive(model, target, audio.embedding, identity=source, render_frames=render_frames)
    result = SwapResult(sync_report(target, own_ap, oracle), sync_report(target, sw_ap, oracle),
                        own_frames or [], sw_frames or [])
    if out_dir is not None:
        export_sequence(result.own_frames, Path(out_dir) / "own")
        export_sequence(result.swapped_frames, Path(out_dir) / "swapped")
    return result


def cross_drive(model, label, audio, out_dir=None, render_frames=True):
    """Drive ``label`` with a track it never saw; r is against ``gain * energy``."""
    model = _model(model)
    model.cloud(label)
    apertures, frames = drive(model, label, audio.embedding, render_frames=render_frames)
    report = sync_report(label, apertures, model.gains.get(label, 1.0) * np.asarray(audio.energy))
    if out_dir is not None and frames:
        export_sequence(frames, out_dir)
    return report, frames


# ---------------------------------------------------------------- suite

def model_predictor(model):
    model = _model(model)

    def predict(label, record):
        with no_grad():
            out = model.forward_frame(label, record.audio, record.eye, record.viewpoint)
        return out.image.data, _mouth_aperture(model, label, out.deformation.d_position.data)
    return predict


def ground_truth_predictor(dataset):
    """Returns the corpus' own frames and apertures; a self-comparison reference."""
    def predict(label, record):
        return dataset.image(label, record.index), record.aperture
    return predict


def _json_number(x):
    return "inf" if math.isinf(x) else x


def evaluate_suite(model, dataset, predictor=None, split="test"):
    """Per-identity PSNR and sync r over ``split``, plus aggregate means."""
    model = _model(model)
    if predictor is None:
        for label in dataset.labels:
            if label not in model.clouds:
                raise UnknownIdentityError(label, model.clouds)
        predictor = model_predictor(model)
    entries = []
    for label in dataset.labels:
        recs = dataset.records(label, split)
        psnrs, pred, oracle = [], [], []
        for rec in recs:
            img, ap = predictor(label, rec)
            psnrs.append(psnr(img, dataset.image(label, rec.index)))
            pred.append(ap)
            oracle.append(rec.aperture)
        sync = sync_report(label, pred, oracle)
        entries.append({"identity": label, "frames": len(recs), "psnr": float(np.mean(psnrs)),
                        "sync_r": sync.r, "amplitude": sync.amplitude, "degenerate": sync.degenerate})
    aggregate = {"psnr": float(np.mean([e["psnr"] for e in entries])),
                 "sync_r": float(np.mean([e["sync_r"] for e in entries])),
                 "identities": len(entries)}
    return {"schema": EVAL_SCHEMA, "split": split, "identities": entries, "aggregate": aggregate}


def report_json(report):
    """JSON text with infinite PSNR written as the string ``"inf"``."""
    def fix(obj):
        if isinstance(obj, dict):
            return {k: fix(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [fix(v) for v in obj]
        if isinstance(obj, float):
            return _json_number(obj)
        return obj
    return json.dumps(fix(report), indent=2, sort_keys=True) + "\n"
