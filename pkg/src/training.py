"""
Training loop: seeded patch sampling, weighted cross-entropy, step LR decay, per-epoch checkpoints
"""
import copy
import math
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from dateutil.parser import isoparse

from errors import CheckpointMismatch, DivergenceDetected, IOFailure, InvalidConfig, UnreadableFormat
from loss import compute_class_weights, label_histogram, weighted_cross_entropy
from network import HDAN, MIN_DIVISOR, NetworkConfig, build_network
from patching import PatchSpec, as_triple, extract, plan_patches
from volume_io import LabelMap, MultiModalVolume

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
OPTIMIZERS = ('adam', 'sgd_momentum')
LOG_COLUMNS = ['epoch', 'lr', 'mean_loss', 'wall_seconds']

Dataset = Sequence[Tuple[MultiModalVolume, LabelMap]]


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    lr_drop_interval: int = 50
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 2
    patches_per_volume_per_epoch: int = 4
    seed: int = 0
    optimizer: str = 'adam'
    patch_size: Tuple[int, int, int] = (64, 64, 64)
    stride: Tuple[int, int, int] = (32, 32, 32)
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'patch_size', as_triple(self.patch_size))
        object.__setattr__(self, 'stride', as_triple(self.stride))

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'TrainConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfig(f"Unknown training settings: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.patch_size, self.stride)

    def validate(self) -> None:
        if self.initial_lr <= 0:
            raise InvalidConfig(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.lr_drop_factor <= 1:
            raise InvalidConfig(f"lr_drop_factor must be > 1, got {self.lr_drop_factor}")
        if self.lr_drop_interval < 1:
            raise InvalidConfig(f"lr_drop_interval must be >= 1, got {self.lr_drop_interval}")
        if self.weight_decay < 0:
            raise InvalidConfig(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ('max_epochs', 'batch_size', 'patches_per_volume_per_epoch'):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_steps is not None and self.max_steps < 1:
            raise InvalidConfig(f"max_steps must be >= 1, got {self.max_steps}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        PatchSpec(self.patch_size, self.stride)
        # batch norm in the deepest stage needs more than one value per channel
        deepest = self.batch_size * math.prod(self.patch_size) / MIN_DIVISOR ** 3
        if deepest <= 1:
            raise InvalidConfig(
                f"batch_size {self.batch_size} with patch_size {self.patch_size} leaves a single voxel per channel "
                f"in the deepest stage; use batch_size >= 2 or a larger patch")


@dataclass
class Checkpoint:
    epoch: int
    network_config: NetworkConfig
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Dict[str, Any]
    train_config: TrainConfig
    loss_history: List[float] = field(default_factory=list)
    created_at: str = ''
    steps: int = 0

    @property
    def created(self) -> Optional[datetime]:
        return isoparse(self.created_at) if self.created_at else None


@dataclass
class TrainingRun:
    loss_history: List[float]
    checkpoint: Checkpoint
    checkpoint_paths: List[Path] = field(default_factory=list)
    steps: int = 0


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise InvalidConfig(f"epoch must be >= 0, got {epoch}")
    return cfg.initial_lr / cfg.lr_drop_factor ** (epoch // cfg.lr_drop_interval)


def make_optimizer(net: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == 'adam':
        return torch.optim.AdamW(net.parameters(), lr=cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8,
                                 weight_decay=cfg.weight_decay)
    return torch.optim.SGD(net.parameters(), lr=cfg.initial_lr, momentum=0.9, weight_decay=cfg.weight_decay)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group['lr'] = lr


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'created_at': ckpt.created_at or datetime.now(timezone.utc).isoformat(),
        'epoch': ckpt.epoch,
        'steps': ckpt.steps,
        'network_config': ckpt.network_config.to_dict(),
        'model_state': ckpt.model_state,
        'optimizer_state': ckpt.optimizer_state,
        'train_config': ckpt.train_config.to_dict(),
        'loss_history': list(ckpt.loss_history),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as e:
        raise IOFailure(f"Cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except FileNotFoundError as e:
        raise IOFailure(f"Checkpoint not found: {path}") from e
    except Exception as e:
        raise UnreadableFormat(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get('format_version') != CHECKPOINT_FORMAT_VERSION:
        raise UnreadableFormat(f"{path} is not an HDAN checkpoint (format {CHECKPOINT_FORMAT_VERSION})")
    return Checkpoint(
        epoch=payload['epoch'],
        network_config=NetworkConfig.from_dict(payload['network_config']),
        model_state=payload['model_state'],
        optimizer_state=payload['optimizer_state'],
        train_config=TrainConfig.from_dict(payload['train_config']),
        loss_history=list(payload['loss_history']),
        created_at=payload['created_at'],
        steps=payload.get('steps', 0),
    )


def restore_network(ckpt: Checkpoint, expected: Optional[NetworkConfig] = None) -> HDAN:
    """Rebuild the network a checkpoint was written from, optionally checking it against a config"""
    if expected is not None and expected != ckpt.network_config:
        diffs = {k: (v, getattr(ckpt.network_config, k)) for k, v in expected.to_dict().items()
                 if getattr(ckpt.network_config, k) != v}
        raise CheckpointMismatch(f"Checkpoint network differs from the configured one (expected, found): {diffs}")
    net = build_network(ckpt.network_config)
    try:
        net.load_state_dict(ckpt.model_state)
    except RuntimeError as e:
        raise CheckpointMismatch(f"Checkpoint weights do not fit the network: {e}") from e
    return net


def sample_epoch(dataset: Dataset, cfg: TrainConfig, epoch: int) -> List[Tuple[int, Tuple[int, int, int]]]:
    """(volume index, origin) pairs for one epoch; a pure function of seed and epoch"""
    rng = np.random.default_rng([cfg.seed, epoch])
    picks = []
    for index, (volume, _) in enumerate(dataset):
        grid = plan_patches(volume.spatial_shape, cfg.patch_spec)
        n = cfg.patches_per_volume_per_epoch
        chosen = rng.choice(len(grid), size=n, replace=n > len(grid))
        picks.extend((index, grid.origins[i]) for i in chosen)
    order = rng.permutation(len(picks))
    return [picks[i] for i in order]


def make_batch(dataset: Dataset, picks, patch_size) -> Tuple[torch.Tensor, torch.Tensor]:
    images = np.stack([extract(dataset[i][0], origin, patch_size) for i, origin in picks])
    labels = np.stack([extract(dataset[i][1], origin, patch_size) for i, origin in picks])
    return torch.from_numpy(images.astype(np.float32)), torch.from_numpy(labels.astype(np.int64))


def train_step(net: HDAN, optimizer, images, labels, weights) -> float:
    net.train()
    optimizer.zero_grad()
    loss = weighted_cross_entropy(net(images), labels, weights)
    value = loss.item()
    if not np.isfinite(value):
        return value
    loss.backward()
    optimizer.step()
    return value


def _append_log(log_path: Path, row: Dict[str, Any]) -> None:
    try:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([row], columns=LOG_COLUMNS).to_csv(
            log_path, mode='a', header=not log_path.exists(), index=False)
    except OSError as e:
        raise IOFailure(f"Cannot append to training log {log_path}: {e}") from e


def train(net: HDAN, dataset: Dataset, cfg: TrainConfig, out_dir=None,
          resume_from=None, log_path=None) -> TrainingRun:
    """
    Optimize `net` on (volume, labels) pairs.

    A checkpoint is written to out_dir after every epoch; with resume_from the
    run continues from a checkpoint's epoch, optimizer state and loss history.
    """
    cfg.validate()
    if not dataset:
        raise InvalidConfig("Training dataset is empty")
    for volume, labels in dataset:
        if volume.num_modalities != net.cfg.in_modalities:
            raise InvalidConfig(f"{volume.subject_id}: {volume.num_modalities} modalities, "
                                f"network expects {net.cfg.in_modalities}")
        if volume.spatial_shape != labels.shape:
            raise InvalidConfig(f"{volume.subject_id}: volume {volume.spatial_shape} vs labels {labels.shape}")

    hist = label_histogram((labels.labels for _, labels in dataset), net.cfg.num_classes)
    weights = compute_class_weights(hist)
    optimizer = make_optimizer(net, cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if log_path is None and out_dir is not None:
        log_path = out_dir / 'train_log.csv'

    start_epoch, steps, history = 0, 0, []
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if ckpt.network_config != net.cfg:
            raise CheckpointMismatch("Cannot resume: checkpoint network config differs from the network")
        net.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch, steps, history = ckpt.epoch, ckpt.steps, list(ckpt.loss_history)
        logger.info("Resuming from epoch %d (%d steps)", start_epoch, steps)

    paths: List[Path] = []
    last_path = None
    ckpt = None
    for epoch in range(start_epoch, cfg.max_epochs):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        started = time.perf_counter()
        lr = lr_at(cfg, epoch)
        set_lr(optimizer, lr)
        picks = sample_epoch(dataset, cfg, epoch)
        losses = []
        for i in range(0, len(picks), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            images, labels = make_batch(dataset, picks[i:i + cfg.batch_size], cfg.patch_size)
            value = train_step(net, optimizer, images, labels, weights)
            if not np.isfinite(value):
                logger.error("Non-finite loss %s at epoch %d step %d", value, epoch, steps)
                raise DivergenceDetected(f"Loss became {value} at epoch {epoch}, step {steps}",
                                         last_checkpoint=last_path)
            losses.append(value)
            steps += 1

        mean_loss = float(np.mean(losses))
        history.append(mean_loss)
        wall = time.perf_counter() - started
        logger.info("epoch %d lr %.3g loss %.5f (%d steps, %.1fs)", epoch + 1, lr, mean_loss, len(losses), wall)

        ckpt = Checkpoint(
            epoch=epoch + 1,
            network_config=net.cfg,
            model_state={k: v.detach().clone() for k, v in net.state_dict().items()},
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            train_config=cfg,
            loss_history=list(history),
            created_at=datetime.now(timezone.utc).isoformat(),
            steps=steps,
        )
        if out_dir is not None:
            last_path = save_checkpoint(ckpt, out_dir / f"checkpoint_epoch{epoch + 1:04d}.pt")
            paths.append(last_path)
        if log_path is not None:
            _append_log(Path(log_path), {'epoch': epoch + 1, 'lr': lr, 'mean_loss': mean_loss,
                                         'wall_seconds': round(wall, 3)})

    if ckpt is None:
        raise InvalidConfig(f"Nothing to train: already at epoch {start_epoch} of {cfg.max_epochs}")
    return TrainingRun(loss_history=history, checkpoint=ckpt, checkpoint_paths=paths, steps=steps)


def train_new(net_cfg: NetworkConfig, dataset: Dataset, cfg: TrainConfig, out_dir=None, **kwargs) -> TrainingRun:
    """Build a fresh network seeded from the training seed and train it"""
    return train(build_network(net_cfg, seed=cfg.seed), dataset, cfg, out_dir=out_dir, **kwargs)
