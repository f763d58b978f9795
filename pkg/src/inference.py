"""
Sliding-window whole-volume prediction
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from errors import BadInputShape, InvalidConfig
from network import HDAN, MIN_DIVISOR, NUM_STAGES, ProbabilityMap, volume_to_tensor
from patching import PatchSpec, accumulate, extract, fuse, plan_patches
from volume_io import CLASS_NAMES, LabelMap, MultiModalVolume

logger = logging.getLogger(__name__)

TIE_BREAKS = ('lowest_class_index',)


@dataclass(frozen=True)
class InferenceConfig:
    patch_spec: PatchSpec = field(default_factory=PatchSpec)
    tie_break: str = 'lowest_class_index'
    trace_attention: bool = False
    attention_stage: int = 1
    workers: int = 1

    def validate(self) -> None:
        if any(p % MIN_DIVISOR for p in self.patch_spec.patch_size):
            raise InvalidConfig(f"Patch size {self.patch_spec.patch_size} must be divisible by {MIN_DIVISOR}")
        if self.tie_break not in TIE_BREAKS:
            raise InvalidConfig(f"tie_break must be one of {TIE_BREAKS}, got {self.tie_break!r}")
        if not 1 <= self.attention_stage <= NUM_STAGES:
            raise InvalidConfig(f"attention_stage must be in 1..{NUM_STAGES}, got {self.attention_stage}")
        if self.workers < 1:
            raise InvalidConfig(f"workers must be >= 1, got {self.workers}")


@dataclass
class Prediction:
    labels: LabelMap
    probabilities: ProbabilityMap
    attention: Optional[np.ndarray] = None


def _run_patch(net: HDAN, vol: MultiModalVolume, origin, cfg: InferenceConfig) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    patch = volume_to_tensor(extract(vol, origin, cfg.patch_spec.patch_size))
    with torch.no_grad():
        probs, trace = net.forward_with_trace(patch, trace=cfg.trace_attention)
    attention = None
    if cfg.trace_attention:
        stage_map = trace.spatial_maps.get(cfg.attention_stage)
        if stage_map is not None:
            scale = 2 ** cfg.attention_stage
            attention = stage_map[0].numpy()
            for axis in (1, 2, 3):
                attention = np.repeat(attention, scale, axis=axis)
    return probs[0].numpy(), attention


def predict_volume(net: HDAN, vol: MultiModalVolume, cfg: InferenceConfig = InferenceConfig(),
                   order_seed: Optional[int] = None) -> Prediction:
    """
    Plan overlapping patches, run each through the network, fuse the class
    probabilities and take the per-voxel argmax.

    Patches may finish in any order (worker pool, or a shuffled submission order
    when order_seed is given); fusion always accumulates in origin order.
    """
    cfg.validate()
    if vol.num_modalities != net.cfg.in_modalities:
        raise BadInputShape(f"Network expects {net.cfg.in_modalities} modalities, volume has {vol.num_modalities}")
    grid = plan_patches(vol.spatial_shape, cfg.patch_spec)
    order = list(grid.origins)
    if order_seed is not None:
        np.random.default_rng(order_seed).shuffle(order)
    logger.debug("Predicting %s with %d patches on %d workers", vol.subject_id or 'volume', len(grid), cfg.workers)

    net.eval()
    results: Dict[tuple, Tuple[np.ndarray, Optional[np.ndarray]]] = {}
    if cfg.workers == 1:
        for origin in order:
            results[origin] = _run_patch(net, vol, origin, cfg)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {origin: pool.submit(_run_patch, net, vol, origin, cfg) for origin in order}
            results = {origin: future.result() for origin, future in futures.items()}

    probabilities = fuse(grid, {o: r[0] for o, r in results.items()}, vol.spacing)
    class_names = CLASS_NAMES if net.cfg.num_classes == len(CLASS_NAMES) else tuple(
        f"class{i}" for i in range(net.cfg.num_classes))
    labels = LabelMap(labels=probabilities.argmax(), class_names=class_names, spacing=vol.spacing,
                      subject_id=vol.subject_id)
    attention = None
    if cfg.trace_attention and net.cfg.enable_sa:
        attention = accumulate(grid, {o: r[1] for o, r in results.items()})[0].astype(np.float32)
    elif cfg.trace_attention:
        logger.warning("Spatial attention is disabled in this network; no attention map produced")
    return Prediction(labels=labels, probabilities=probabilities, attention=attention)
