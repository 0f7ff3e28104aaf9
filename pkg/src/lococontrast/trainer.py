"""Joint Adam training of both pipelines, with checkpoint/resume and a CSV step log."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, open_dataset
from .encoders import ModelConfig, build_models
from .errors import ChecksumError, ConfigError, EmptyDataset, NonFiniteLoss, VersionError
from .loss import LossConfig, anchor_ntxent
from .pairing import assemble_pair_batch, make_view, resolve_anchor_count, resolve_levels

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOCOCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sI32sQ")  # magic, version, sha256, payload length


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    anchors_per_image: int | str = 10  # int, "batch" or "half-batch"
    temperature: float = 0.5
    include_symmetric: bool = False
    anchor_scope: str = "own-image"
    seed: int = 0
    levels: str | list[int] = "all"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: str | None = None
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    log_path: str | None = None
    min_side: int = 608  # ignored for synthetic manifests
    augment: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        resolve_anchor_count(self.anchors_per_image, self.batch_size)
        resolve_levels(self.levels)
        self.loss_config().validate()
        self.model.validate()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.include_symmetric, self.anchor_scope)

    @property
    def anchor_count(self) -> int:
        return resolve_anchor_count(self.anchors_per_image, self.batch_size)

    def resolved_log_path(self) -> Path:
        return Path(self.log_path) if self.log_path else Path(self.out_dir) / "train_log.csv"

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = d.pop("model", None) or {}
        return cls(model=ModelConfig.from_json(model) if isinstance(model, dict) else model, **d)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: dict, path) -> Path:
    """Write ``state`` atomically: header + sha256 + torch payload, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                          hashlib.sha256(payload).digest(), len(payload))
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ChecksumError(f"{path}: truncated header")
    magic, version, digest, length = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    payload = raw[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def models_from_checkpoint(path):
    """Rebuild (crop_encoder, pyramid_encoder, TrainConfig) from a checkpoint, in eval mode."""
    state = load_checkpoint(path)
    config = TrainConfig.from_json(state["config"])
    crop_encoder, pyramid_encoder = build_models(config.model, config.seed)
    crop_encoder.load_state_dict(state["crop_encoder"])
    pyramid_encoder.load_state_dict(state["pyramid_encoder"])
    crop_encoder.eval()
    pyramid_encoder.eval()
    return crop_encoder, pyramid_encoder, config


# ---------------------------------------------------------------------------
# training


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)


def image_rng(seed: int, epoch: int, step: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2, epoch, step, k]))


def train_step(views, rngs, crop_encoder, pyramid_encoder, optimizer, config: TrainConfig):
    """One forward through both pipelines, the loss, and one Adam update.

    Returns (loss value, assembled batch).
    """
    optimizer.zero_grad(set_to_none=True)
    batch = assemble_pair_batch(views, crop_encoder, pyramid_encoder, rngs,
                                anchors_per_image=config.anchor_count, levels=config.levels)
    loss = anchor_ntxent(batch.levels, config.loss_config())
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    loss.backward()
    optimizer.step()
    return value, batch


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float]
    epochs_run: int


class Trainer:
    def __init__(self, config: TrainConfig, manifest: DatasetManifest | None = None):
        config.validate()
        self.config = config
        if manifest is None:
            if not config.dataset:
                raise ConfigError("config.dataset is not set")
            manifest = open_dataset(config.dataset, split="train")
        if len(manifest) == 0:
            raise EmptyDataset("training dataset is empty")
        self.manifest = manifest
        self.min_side = None if manifest.generator_config is not None else config.min_side
        self.crop_encoder, self.pyramid_encoder = build_models(config.model, config.seed)
        params = list(self.crop_encoder.parameters()) + list(self.pyramid_encoder.parameters())
        self.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        self.epoch = 0  # completed epochs
        self.global_step = 0
        self.out_dir = Path(config.out_dir)

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": self.config.to_json(),
            "crop_encoder": self.crop_encoder.state_dict(),
            "pyramid_encoder": self.pyramid_encoder.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "rng": {"seed": self.config.seed, "torch": torch.get_rng_state()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.crop_encoder.load_state_dict(state["crop_encoder"])
        self.pyramid_encoder.load_state_dict(state["pyramid_encoder"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.epoch = int(state["epoch"])
        self.global_step = int(state["global_step"])
        torch.set_rng_state(state["rng"]["torch"])

    def resume(self, path) -> None:
        self.load_state_dict(load_checkpoint(path))
        logger.info("resumed from %s at epoch %d", path, self.epoch)

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.out_dir / f"ckpt_epoch{self.epoch:04d}.pt"
        save_checkpoint(self.state_dict(), path)
        return path

    # -- loop -------------------------------------------------------------

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.manifest) / self.config.batch_size)

    def _views(self, indices, epoch, step):
        views, rngs = [], []
        for k, idx in enumerate(indices):
            rng = image_rng(self.config.seed, epoch, step, k)
            image = self.manifest.load(int(idx), self.min_side)
            views.append(make_view(image, rng, augment=self.config.augment))
            rngs.append(rng)
        return views, rngs

    def _dump_bad_batch(self, views, epoch, step, exc) -> Path:
        path = self.out_dir / f"nonfinite_epoch{epoch}_step{step}.pt"
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.save({
            "error": str(exc),
            "epoch": epoch,
            "step": step,
            "image_ids": [v.image_id for v in views],
            "crop_specs": [v.crop_spec.to_json() for v in views],
            "crop_augs": [asdict(v.crop_aug) for v in views],
            "full_augs": [asdict(v.full_aug) for v in views],
            "crops": [torch.from_numpy(v.crop.copy()) for v in views],
        }, path)
        return path

    def run_epoch(self, log_writer=None) -> list[float]:
        cfg = self.config
        epoch = self.epoch
        order = epoch_order(cfg.seed, epoch, len(self.manifest))
        losses = []
        t0 = time.perf_counter()
        for step in range(self.steps_per_epoch()):
            indices = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            views, rngs = self._views(indices, epoch, step)
            try:
                value, _ = train_step(views, rngs, self.crop_encoder, self.pyramid_encoder,
                                      self.optimizer, cfg)
            except NonFiniteLoss as exc:
                dump = self._dump_bad_batch(views, epoch, step, exc)
                raise NonFiniteLoss(f"{exc} at epoch {epoch} step {step}; batch dumped to {dump}") from exc
            self.global_step += 1
            losses.append(value)
            if log_writer is not None:
                log_writer.writerow([epoch, step, self.global_step, f"{value:.8f}",
                                     f"{time.perf_counter() - t0:.3f}"])
        self.epoch += 1
        return losses

    def train(self, epochs: int | None = None) -> TrainResult:
        """Run until ``epochs`` (default config.epochs) epochs have completed."""
        cfg = self.config
        target = cfg.epochs if epochs is None else epochs
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = cfg.resolved_log_path()
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not log_path.exists() or self.global_step == 0
        losses: list[float] = []
        last = None
        start_epoch = self.epoch
        with open(log_path, "w" if fresh else "a", newline="") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(["epoch", "step", "global_step", "loss", "wall_time"])
            while self.epoch < target:
                epoch_losses = self.run_epoch(writer)
                fh.flush()
                losses.extend(epoch_losses)
                logger.info("epoch %d/%d mean loss %.4f", self.epoch, target,
                            float(np.mean(epoch_losses)))
                if self.epoch % cfg.checkpoint_every == 0 or self.epoch == target:
                    last = self.save()
        if last is None:
            last = self.save()
        final = self.out_dir / "last.pt"
        save_checkpoint(load_checkpoint(last), final)
        return TrainResult(checkpoint=final, log_path=log_path, losses=losses,
                           epochs_run=self.epoch - start_epoch)


def train(config: TrainConfig, resume=None, manifest: DatasetManifest | None = None) -> TrainResult:
    trainer = Trainer(config, manifest)
    if resume is not None:
        trainer.resume(resume)
    return trainer.train()


def read_train_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "step": int(r["step"]),
                 "global_step": int(r["global_step"]), "loss": float(r["loss"]),
                 "wall_time": float(r["wall_time"])} for r in csv.DictReader(fh)]
