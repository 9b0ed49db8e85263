"""Procedural multi-identity talking-face corpus with analytic ground truth.

Each identity is a stylized face made of fixed Gaussian primitives: a filled
head ellipse, two eyes and an upper and lower mouth bar. A frame opens the
mouth by ``aperture = gain * energy`` (the lower bar moves down), squashes
the eyes vertically by ``1 - blink`` and views the head from the frame's
azimuth. Frames are rendered with the package's own splat renderer.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .render import Camera, export_frame, import_frame, render
from .scene import EYE_OFFSET, FEATURE_DEPTH, HEAD_ASPECT, MOUTH_HEIGHT

SCHEMA = "gensync-dataset/1"
N_ENERGY_CHANNELS = 4
GAIN_RANGE = (0.05, 0.3)
SILENCE_THRESHOLD = 0.05

HEAD_SPACING = 0.1
HEAD_SIGMA = 0.07
HEAD_OPACITY = 0.95
EYE_COLOR = (0.08, 0.06, 0.1)
LIP_COLOR = (0.55, 0.12, 0.15)
LIP_SIGMA_Y = 0.03
LIP_OPACITY = 0.9
MIN_BLINK_SCALE = 1e-6


@dataclass
class IdentitySpec:
    label: str
    head_color: list
    head_radius: float
    mouth_half_width: float
    gain: float
    blink_rate: float
    seed: int

    def __post_init__(self):
        if not self.gain > 0:
            raise ContractError(f"style gain must be positive, got {self.gain}")
        if not 0.3 <= self.head_radius <= 0.8:
            raise ContractError(f"head radius {self.head_radius} outside [0.3, 0.8]")
        if any(not 0.0 <= c <= 1.0 for c in self.head_color):
            raise ContractError("head color channels must lie in [0, 1]")


@dataclass
class AudioTrack:
    fps: float
    embedding: np.ndarray  # T x d_a
    energy: np.ndarray     # T
    source: str = ""
    profile: str = "smooth"
    seed: int = 0

    @property
    def length(self):
        return self.embedding.shape[0]


@dataclass
class FrameRecord:
    index: int
    image: str
    audio: list
    energy: float
    eye: list
    viewpoint: list
    aperture: float


@dataclass
class DatasetManifest:
    identities: list
    frames: dict
    splits: dict
    fps: float = 25.0
    image_size: tuple = (64, 64)
    camera_scale: float = 1.0
    audio_dim: int = 16
    seed: int = 0
    profile: str = "speechlike"
    schema: str = SCHEMA

    def spec(self, label):
        for s in self.identities:
            if s.label == label:
                return s
        raise KeyError(label)

    @property
    def labels(self):
        return [s.label for s in self.identities]

    def camera(self, viewpoint=(0.0, 0.0)):
        w, h = self.image_size
        return Camera(float(viewpoint[0]), float(viewpoint[1]), self.camera_scale, int(w), int(h))

    def to_json(self):
        doc = {
            "schema": self.schema, "seed": self.seed, "fps": self.fps,
            "image_size": list(self.image_size), "camera_scale": self.camera_scale,
            "audio_dim": self.audio_dim, "profile": self.profile,
            "identities": [asdict(s) for s in self.identities],
            "frames": {k: [asdict(r) for r in v] for k, v in self.frames.items()},
            "splits": self.splits,
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise ContractError(f"unsupported dataset schema {doc.get('schema')!r}")
        return cls(
            identities=[IdentitySpec(**s) for s in doc["identities"]],
            frames={k: [FrameRecord(**r) for r in v] for k, v in doc["frames"].items()},
            splits=doc["splits"], fps=doc["fps"], image_size=tuple(doc["image_size"]),
            camera_scale=doc["camera_scale"], audio_dim=doc["audio_dim"], seed=doc["seed"],
            profile=doc["profile"], schema=doc["schema"])


# ---------------------------------------------------------------- tracks

def _envelope(rng, t):
    k = int(rng.integers(2, 5))
    freqs = rng.uniform(0.5, 3.0, k)
    phases = rng.uniform(0.0, 2 * np.pi, k)
    amps = rng.uniform(0.5, 1.0, k)
    env = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    lo, hi = env.min(), env.max()
    if hi - lo < 1e-12:
        return np.zeros_like(t)
    return (env - lo) / (hi - lo)


def _speech_gate(rng, t):
    gate = np.ones_like(t)
    now = rng.uniform(0.0, 0.5)
    while now < t[-1] + 1e-9:
        length = rng.uniform(0.1, 0.4)
        gate[(t >= now) & (t < now + length)] = 0.0
        now += length + rng.uniform(0.3, 1.0)
    return gate


def _audio_once(T, seed, profile, audio_dim, fps):
    rng = np.random.default_rng(seed)
    t = np.arange(T) / fps
    env = _envelope(rng, t)
    if profile == "speechlike":
        env = env * _speech_gate(rng, t)
    emb = np.empty((T, audio_dim))
    ripple_f = rng.uniform(1.0, 4.0, N_ENERGY_CHANNELS)
    ripple_p = rng.uniform(0.0, 2 * np.pi, N_ENERGY_CHANNELS)
    for c in range(N_ENERGY_CHANNELS):
        emb[:, c] = np.clip(env * (1.0 + 0.15 * np.sin(2 * np.pi * ripple_f[c] * t + ripple_p[c])), 0.0, 1.0)
    emb[:, N_ENERGY_CHANNELS:] = rng.normal(0.0, 0.05, (T, audio_dim - N_ENERGY_CHANNELS))
    return emb


def synth_audio(T, seed, profile="smooth", audio_dim=16, fps=25.0, source=""):
    """Synthetic audio-feature track; energy is the mean of the first 4 channels.

    A ``speechlike`` track with no frame quieter than SILENCE_THRESHOLD is
    regenerated from the next seed.
    """
    if T < 1:
        raise ContractError("audio track needs T >= 1")
    if profile not in ("smooth", "speechlike"):
        raise ContractError(f"unknown audio profile {profile!r}")
    if audio_dim <= N_ENERGY_CHANNELS:
        raise ContractError(f"audio_dim must exceed {N_ENERGY_CHANNELS}")
    used = seed
    while True:
        emb = _audio_once(T, used, profile, audio_dim, fps)
        energy = emb[:, :N_ENERGY_CHANNELS].mean(axis=1)
        if profile == "smooth" or energy.min() < SILENCE_THRESHOLD:
            break
        used += 1
    return AudioTrack(fps, emb, energy, source, profile, used)


def constant_audio(T, level=0.0, audio_dim=16, fps=25.0):
    emb = np.zeros((T, audio_dim))
    emb[:, :N_ENERGY_CHANNELS] = level
    return AudioTrack(fps, emb, emb[:, :N_ENERGY_CHANNELS].mean(axis=1), "constant", "constant", 0)


def synth_blinks(T, rate, seed, fps=25.0, duration=0.2):
    """Both eyes blink together with a raised-cosine closure profile."""
    rng = np.random.default_rng(seed)
    t = np.arange(T) / fps
    e = np.zeros(T)
    now = rng.exponential(1.0 / rate)
    while now < t[-1] + duration:
        phase = (t - now) / duration
        inside = (phase >= 0) & (phase <= 1)
        e[inside] = np.maximum(e[inside], 0.5 * (1 - np.cos(2 * np.pi * phase[inside])))
        now += duration + rng.exponential(1.0 / rate)
    e = np.clip(e, 0.0, 1.0)
    return np.stack([e, e], axis=1)


def synth_viewpoints(T, seed, fps=25.0, amplitude=0.3, freq=0.25):
    rng = np.random.default_rng(seed)
    t = np.arange(T) / fps
    az = amplitude * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return np.stack([az, np.zeros(T)], axis=1)


# ---------------------------------------------------------------- faces

def _snap_to_row_boundary(v, cam):
    """Move a height to the nearest boundary between pixel rows."""
    px = cam.height / (2.0 * cam.scale)
    return round(v * px) / px


def face_primitives(spec, energy, blink, cam):
    """Positions, unit quaternions, log-scales, opacities, colors and region tags."""
    rx, ry = spec.head_radius, spec.head_radius * HEAD_ASPECT
    pts = []
    row = 0
    y = -ry
    while y <= ry + 1e-12:
        shift = 0.5 * HEAD_SPACING * (row % 2)
        x = -rx + shift
        while x <= rx + 1e-12:
            if (x / rx) ** 2 + (y / ry) ** 2 <= (1.0 - 0.4 * HEAD_SPACING / rx) ** 2:
                pts.append((x, y))
            x += HEAD_SPACING
        y += HEAD_SPACING * np.sqrt(3) / 2
        row += 1
    head = np.array(pts)
    n_head = head.shape[0]

    pos, scl, op, col, tag = [], [], [], [], []
    pos.append(np.column_stack([head, np.zeros(n_head)]))
    scl.append(np.full((n_head, 3), HEAD_SIGMA))
    op.append(np.full(n_head, HEAD_OPACITY))
    col.append(np.tile(spec.head_color, (n_head, 1)))
    tag.append(np.zeros(n_head, dtype=np.int64))

    squash = max(1.0 - float(np.max(blink)), MIN_BLINK_SCALE)
    eye_y = _snap_to_row_boundary(EYE_OFFSET[1] * ry, cam)
    for side, t in ((-1.0, 2), (1.0, 3)):
        pos.append(np.array([[side * EYE_OFFSET[0] * rx, eye_y, FEATURE_DEPTH]]))
        scl.append(np.array([[0.12 * rx, 0.08 * rx * squash, 0.04]]))
        op.append(np.array([0.95]))
        col.append(np.array([EYE_COLOR]))
        tag.append(np.array([t]))

    aperture = spec.gain * energy
    w = spec.mouth_half_width
    mouth_y = MOUTH_HEIGHT * ry
    xs = np.array([-2.0 / 3.0, 0.0, 2.0 / 3.0]) * w
    for dy in (0.0, -aperture):
        pos.append(np.column_stack([xs, np.full(3, mouth_y + dy), np.full(3, FEATURE_DEPTH)]))
        scl.append(np.tile([w / 3.0, LIP_SIGMA_Y, 0.03], (3, 1)))
        op.append(np.full(3, LIP_OPACITY))
        col.append(np.tile(LIP_COLOR, (3, 1)))
        tag.append(np.ones(3, dtype=np.int64))

    pos, scl = np.concatenate(pos), np.concatenate(scl)
    quat = np.zeros((pos.shape[0], 4))
    quat[:, 0] = 1.0
    return pos, quat, np.log(scl), np.concatenate(op), np.concatenate(col), np.concatenate(tag)


def ground_truth_frame(spec, energy, blink, viewpoint, cam):
    """Render the analytic face; returns (H x W x 3 image, aperture)."""
    cam = Camera(float(viewpoint[0]), float(viewpoint[1]), cam.scale, cam.width, cam.height)
    pos, quat, ls, op, col, _ = face_primitives(spec, energy, blink, cam)
    img = render(Tensor(pos), Tensor(quat), Tensor(ls), Tensor(op), Tensor(col), cam)
    return img.data, spec.gain * energy


# ---------------------------------------------------------------- corpus

def even_gains(K):
    if K == 1:
        return [GAIN_RANGE[1]]
    return list(np.linspace(GAIN_RANGE[0], GAIN_RANGE[1], K))


def identity_label(k):
    return chr(ord("A") + k) if k < 26 else f"ID{k}"


def make_identity_specs(K, seed, gains=None):
    gains = even_gains(K) if gains is None else [float(g) for g in gains]
    if len(gains) != K:
        raise ContractError(f"need {K} gains, got {len(gains)}")
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(K):
        hue = rng.uniform(0, 1)
        base = np.array([0.85, 0.62, 0.48]) + 0.12 * np.array(
            [np.cos(2 * np.pi * hue), np.cos(2 * np.pi * (hue + 1 / 3)), np.cos(2 * np.pi * (hue + 2 / 3))])
        specs.append(IdentitySpec(
            label=identity_label(k),
            head_color=[float(c) for c in np.clip(base, 0.0, 1.0)],
            head_radius=float(rng.uniform(0.5, 0.58)),
            mouth_half_width=float(rng.uniform(0.13, 0.18)),
            gain=float(gains[k]),
            blink_rate=float(rng.uniform(0.25, 0.5)),
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return specs


def split_indices(T):
    n_test = T // 10
    return list(range(T - n_test)), list(range(T - n_test, T))


def generate_dataset(K, T, seed, out_dir, gains=None, fps=25.0, image_size=64, camera_scale=1.0,
                     audio_dim=16, profile="speechlike", png=False):
    """Write frames and ``manifest.json`` under ``out_dir``; returns the manifest."""
    if K < 1 or T < 10:
        raise ContractError(f"need K >= 1 and T >= 10, got K={K}, T={T}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create dataset directory: {exc.strerror}", os.fspath(out)) from exc

    specs = make_identity_specs(K, seed, gains)
    frames, splits = {}, {}
    base_cam = Camera(0.0, 0.0, camera_scale, image_size, image_size)
    for spec in specs:
        audio = synth_audio(T, spec.seed, profile, audio_dim, fps, spec.label)
        blinks = synth_blinks(T, spec.blink_rate, spec.seed + 1, fps)
        views = synth_viewpoints(T, spec.seed + 2, fps)
        (out / spec.label).mkdir(exist_ok=True)
        records = []
        for n in range(T):
            energy = float(audio.energy[n])
            img, aperture = ground_truth_frame(spec, energy, blinks[n], views[n], base_cam)
            rel = f"{spec.label}/frame_{n:04d}.ppm"
            export_frame(img, out / rel, png=png)
            records.append(FrameRecord(
                index=n, image=rel, audio=[float(x) for x in audio.embedding[n]], energy=energy,
                eye=[float(x) for x in blinks[n]], viewpoint=[float(x) for x in views[n]],
                aperture=float(aperture)))
        frames[spec.label] = records
        train, test = split_indices(T)
        splits[spec.label] = {"train": train, "test": test}

    manifest = DatasetManifest(specs, frames, splits, fps, (image_size, image_size), camera_scale,
                               audio_dim, seed, profile)
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


@dataclass
class Dataset:
    """A manifest plus its decoded frames, keyed by identity label."""

    root: Path
    manifest: DatasetManifest
    images: dict = field(default_factory=dict)

    @property
    def labels(self):
        return self.manifest.labels

    def records(self, label, split=None):
        recs = self.manifest.frames[label]
        if split is None:
            return recs
        return [recs[k] for k in self.manifest.splits[label][split]]

    def image(self, label, index):
        return self.images[label][index]

    def subset(self, labels):
        man = self.manifest
        sub = DatasetManifest([man.spec(l) for l in labels], {l: man.frames[l] for l in labels},
                              {l: man.splits[l] for l in labels}, man.fps, man.image_size,
                              man.camera_scale, man.audio_dim, man.seed, man.profile)
        return Dataset(self.root, sub, {l: self.images[l] for l in labels})


def load_dataset(root):
    root = Path(root)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text(encoding="utf-8"))
    images = {}
    for label, recs in manifest.frames.items():
        images[label] = [import_frame(root / r.image) for r in recs]
    return Dataset(root, manifest, images)


def audio_from_records(records, fps=25.0, source=""):
    emb = np.array([r.audio for r in records])
    return AudioTrack(fps, emb, np.array([r.energy for r in records]), source, "dataset", 0)
