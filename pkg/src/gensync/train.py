"""Two-stage training: per-identity canonical fitting, then joint deformation training."""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import Adam, ParamGroup, Tensor, backward, no_grad
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, ContractError
from .model import GenSyncModel, ModelConfig
from .render import image_loss, pyramid_loss
from .scene import GaussianCloud

log = logging.getLogger(__name__)

FULL_SCALE_STAGE1_ITERS = 8000
FULL_SCALE_STAGE2_ITERS = 50000
CANONICAL_ENERGY = 0.2
CONFIG_SCHEMA = "gensync-config/1"
COST_SCHEMA = "gensync-cost/1"


@dataclass
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 8000
    lr_positions: float = 1.6e-3
    lr_features: float = 1e-3
    lr_identity: float = 5e-3
    seed: int = 0
    image_size: int = 64
    n_gaussians: int = 300
    eval_every: int = 0
    coarse_weight: float = 1.0

    def __post_init__(self):
        if self.stage1_iters < 1 or self.stage2_iters < 1:
            raise ConfigError("iteration counts must be >= 1")
        if min(self.lr_positions, self.lr_features, self.lr_identity) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.coarse_weight < 0:
            raise ConfigError("coarse_weight must be >= 0")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path, **overrides):
        doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc)

    def to_dict(self):
        return {"schema": CONFIG_SCHEMA, **asdict(self)}

    def model_config(self, dataset=None):
        """Model shape; a dataset's own image size, camera scale and audio width take precedence."""
        if dataset is None:
            return ModelConfig(n_gaussians=self.n_gaussians, image_size=self.image_size)
        man = dataset.manifest
        return ModelConfig(n_gaussians=self.n_gaussians, image_size=int(man.image_size[0]),
                           camera_scale=man.camera_scale, audio_dim=man.audio_dim)


def derive_seed(seed, *tags):
    words = [int(seed)] + [zlib.crc32(str(t).encode("utf-8")) for t in tags]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def psnr_value(img, target):
    mse = float(np.mean((np.asarray(img) - np.asarray(target)) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


class TrainLog:
    """CSV rows ``step,identity,loss,psnr``; a no-op without a path."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path

    def add(self, step, identity, loss, psnr):
        self.rows.append((step, identity, loss, psnr))

    def write(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "identity", "loss", "psnr"])
            for step, ident, loss, psnr in self.rows:
                w.writerow([step, ident, repr(loss), repr(psnr)])


def _optimizer(model, cfg, labels, shared=True):
    pos, feat, ident = [], [], []
    for label in labels:
        cloud = model.cloud(label)
        pos.append(cloud.positions)
        feat += [cloud.features] + cloud.fc.parameters()
        if shared:
            ident.append(model.identities.vectors[label])
    if shared:
        feat += list(model.shared_named_parameters().values())
    groups = [ParamGroup(pos, cfg.lr_positions), ParamGroup(feat, cfg.lr_features)]
    if ident:
        groups.append(ParamGroup(ident, cfg.lr_identity))
    return Adam(groups)


def _optimizer_state_by_name(model, opt):
    names = {id(p): n for n, p in model.named_parameters().items()}
    return {names[k]: st for k, st in opt.state.items() if k in names}


def _step(model, opt, labels, loss):
    backward(loss)
    opt.step()
    for label in labels:
        model.cloud(label).clamp_positions()


def canonical_subset(dataset, label):
    """Train frames with a near-closed mouth, or the quietest tenth as a fallback."""
    recs = dataset.records(label, "train")
    quiet = [r for r in recs if r.energy < CANONICAL_ENERGY]
    if quiet:
        return quiet
    log.warning("identity %s has no train frame with energy < %.2f; using the quietest 10%%",
                label, CANONICAL_ENERGY)
    k = max(1, len(recs) // 10)
    return sorted(recs, key=lambda r: (r.energy, r.index))[:k]


def canonical_psnr(model, dataset, label, records):
    with no_grad():
        vals = [psnr_value(model.canonical_render(label, r.viewpoint).data, dataset.image(label, r.index))
                for r in records]
    return float(np.mean(vals))


def train_canonical(dataset, label, cfg, log_path=None):
    """Stage 1: fit one identity's cloud to its neutral-pose frames without deformation."""
    if label not in dataset.labels:
        raise ContractError(f"identity {label!r} is not in the dataset")
    model = GenSyncModel.init(cfg.model_config(dataset), derive_seed(cfg.seed, "shared"))
    model.add_identity(label, derive_seed(cfg.seed, "identity", label))
    model.gains[label] = dataset.manifest.spec(label).gain
    records = canonical_subset(dataset, label)
    rng = np.random.default_rng(derive_seed(cfg.seed, "stage1", label))
    opt = _optimizer(model, cfg, [label], shared=False)
    tlog = TrainLog(log_path)
    for step in range(cfg.stage1_iters):
        r = records[int(rng.integers(len(records)))]
        target = dataset.image(label, r.index)
        opt.zero_grad()
        img = model.canonical_render(label, r.viewpoint)
        loss = image_loss(img, target)
        _step(model, opt, [label], loss)
        tlog.add(step, label, loss.item(), psnr_value(img.data, target))
    tlog.write()
    final = canonical_psnr(model, dataset, label, records)
    log.info("stage 1 %s: canonical-subset PSNR %.2f dB over %d frames", label, final, len(records))
    return Checkpoint(model, _optimizer_state_by_name(model, opt), rng.bit_generator.state,
                      cfg.stage1_iters, {"train_psnr": final, "canonical_frames": float(len(records))})


def heldout_psnr(model, dataset, label):
    with no_grad():
        vals = [psnr_value(model.forward_frame(label, r.audio, r.eye, r.viewpoint).image.data,
                           dataset.image(label, r.index))
                for r in dataset.records(label, "test")]
    return float(np.mean(vals))


def _copy_cloud(cloud):
    return GaussianCloud(Tensor(cloud.positions.data.copy(), True), Tensor(cloud.features.data.copy(), True),
                         copy.deepcopy(cloud.fc), cloud.region_tags.copy())


def train_joint(dataset, stage1, cfg, log_path=None, target_psnr=None):
    """Stage 2: train shared and per-identity parameters on all identities at once.

    ``stage1`` maps each dataset label to its stage-1 checkpoint. With
    ``cfg.eval_every`` set, test PSNR is probed periodically and the first step at
    which every identity reaches ``target_psnr`` is recorded in the checkpoint meta.
    """
    labels = dataset.labels
    for label in labels:
        if label not in stage1:
            raise ContractError(f"missing stage-1 checkpoint for identity {label!r}")
    model = GenSyncModel.init(cfg.model_config(dataset), derive_seed(cfg.seed, "shared"))
    for label in labels:
        src = stage1[label].model
        model.add_identity(label, 0, cloud=_copy_cloud(src.cloud(label)),
                           vector=src.identities.vectors[label].data.copy())
        model.gains[label] = dataset.manifest.spec(label).gain
    train = {label: dataset.records(label, "train") for label in labels}
    rng = np.random.default_rng(derive_seed(cfg.seed, "stage2", *labels))
    opt = _optimizer(model, cfg, labels)
    tlog = TrainLog(log_path)
    reached = None
    probes = []
    for step in range(cfg.stage2_iters):
        label = labels[int(rng.integers(len(labels)))]
        recs = train[label]
        r = recs[int(rng.integers(len(recs)))]
        target = dataset.image(label, r.index)
        opt.zero_grad()
        out = model.forward_frame(label, r.audio, r.eye, r.viewpoint)
        loss = pyramid_loss(out.image, target, cfg.coarse_weight)
        value = loss.item()
        if not np.isfinite(value):
            raise ContractError(f"non-finite loss at step {step} on identity {label}")
        _step(model, opt, [label], loss)
        tlog.add(step, label, value, psnr_value(out.image.data, target))
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            scores = {l: heldout_psnr(model, dataset, l) for l in labels}
            probes.append((step + 1, min(scores.values())))
            if reached is None and target_psnr is not None and min(scores.values()) >= target_psnr:
                reached = step + 1
    tlog.write()
    meta = {}
    if reached is not None:
        meta["steps_to_target"] = float(reached)
    if probes:
        meta["probe_steps"] = np.array([p[0] for p in probes], dtype=np.float64)
        meta["probe_min_psnr"] = np.array([p[1] for p in probes])
    return Checkpoint(model, _optimizer_state_by_name(model, opt), rng.bit_generator.state,
                      cfg.stage2_iters, meta)


# ---------------------------------------------------------------- cost harness

def parameter_counts(cfg, dataset, max_k):
    """Shared and total parameter counts for 1..max_k identities, joint vs per-identity."""
    rows = []
    for k in range(1, max_k + 1):
        model = GenSyncModel.init(cfg.model_config(dataset), 0)
        for j in range(k):
            model.add_identity(f"id{j}", j)
        shared = model.shared_parameter_count()
        per_id = model.identity_parameter_count("id0")
        rows.append({"K": k, "shared": shared, "gensync_total": shared + k * per_id,
                     "baseline_total": k * (shared + per_id)})
    return rows


def measure_training_cost(dataset, cfg, target_psnr=27.0, workdir=None):
    """Per-identity baseline vs one joint model, at equal per-identity step budgets.

    Stage-1 runs are identical in both arms (same seed, same data), so each is
    trained once and its steps and seconds are charged to both totals.
    """
    labels = dataset.labels
    if len(labels) < 2:
        raise ContractError("the cost comparison needs at least two identities")
    workdir = Path(workdir) if workdir else None
    stage1, s1_secs = {}, {}
    for label in labels:
        t0 = time.perf_counter()
        stage1[label] = train_canonical(dataset, label, cfg)
        s1_secs[label] = time.perf_counter() - t0
    stage1_steps = cfg.stage1_iters * len(labels)

    t0 = time.perf_counter()
    joint = train_joint(dataset, stage1, cfg, target_psnr=target_psnr)
    joint_secs = time.perf_counter() - t0

    baseline, base_secs, base_psnrs = {}, {}, {}
    for label in labels:
        t0 = time.perf_counter()
        baseline[label] = train_joint(dataset.subset([label]), {label: stage1[label]}, cfg,
                                      target_psnr=target_psnr)
        base_secs[label] = time.perf_counter() - t0
        base_psnrs[label] = heldout_psnr(baseline[label].model, dataset, label)
    joint_psnrs = {l: heldout_psnr(joint.model, dataset, l) for l in labels}

    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
        for label in labels:
            save_checkpoint(stage1[label], workdir / f"stage1_{label}.ckpt")
            save_checkpoint(baseline[label], workdir / f"baseline_{label}.ckpt")
        save_checkpoint(joint, workdir / "joint.ckpt")

    s1_total = float(sum(s1_secs.values()))
    gensync_steps = stage1_steps + cfg.stage2_iters
    baseline_steps = stage1_steps + cfg.stage2_iters * len(labels)
    gensync_secs = s1_total + joint_secs
    baseline_total_secs = s1_total + float(sum(base_secs.values()))
    counts = parameter_counts(cfg, dataset, len(labels))
    report = {
        "schema": COST_SCHEMA,
        "identities": labels,
        "target_psnr": target_psnr,
        "config": cfg.to_dict(),
        "gensync": {
            "gradient_steps": gensync_steps,
            "wall_clock_seconds": gensync_secs,
            "parameters": counts[-1]["gensync_total"],
            "heldout_psnr": joint_psnrs,
            "meets_target": all(v >= target_psnr for v in joint_psnrs.values()),
            "steps_to_target": joint.meta.get("steps_to_target"),
        },
        "baseline": {
            "gradient_steps": baseline_steps,
            "wall_clock_seconds": baseline_total_secs,
            "parameters": counts[-1]["baseline_total"],
            "heldout_psnr": base_psnrs,
            "meets_target": all(v >= target_psnr for v in base_psnrs.values()),
            "steps_to_target": {l: baseline[l].meta.get("steps_to_target") for l in labels},
        },
        "stage1": {"gradient_steps": stage1_steps, "wall_clock_seconds": s1_total,
                   "train_psnr": {l: stage1[l].meta["train_psnr"] for l in labels}},
        "step_ratio": gensync_steps / baseline_steps,
        "wall_clock_ratio": gensync_secs / baseline_total_secs,
        "parameter_scaling": counts,
    }
    return report, {"stage1": stage1, "joint": joint, "baseline": baseline}
