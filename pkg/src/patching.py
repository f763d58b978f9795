"""
Overlapping 3D patch grids: planning, extraction and count-weighted fusion
"""
import itertools
from dataclasses import dataclass, field
from typing import List, Mapping, Sequence, Tuple, Union

import numpy as np

from errors import GridMismatch, InvalidConfig, OriginOutOfBounds, PatchLargerThanVolume
from network import ProbabilityMap
from volume_io import LabelMap, MultiModalVolume

Triple = Tuple[int, int, int]

DEFAULT_PATCH_SIZE = (64, 64, 64)
DEFAULT_STRIDE = (32, 32, 32)


def as_triple(value: Union[int, Sequence[int]]) -> Triple:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    values = tuple(int(v) for v in value)
    if len(values) == 1:
        return values * 3
    if len(values) != 3:
        raise InvalidConfig(f"Expected 1 or 3 integers, got {value!r}")
    return values


@dataclass(frozen=True)
class PatchSpec:
    patch_size: Triple = DEFAULT_PATCH_SIZE
    stride: Triple = DEFAULT_STRIDE

    def __post_init__(self):
        object.__setattr__(self, 'patch_size', as_triple(self.patch_size))
        object.__setattr__(self, 'stride', as_triple(self.stride))
        for p, s in zip(self.patch_size, self.stride):
            if p < 1 or not 1 <= s <= p:
                raise InvalidConfig(
                    f"Patch spec needs 1 <= stride <= patch_size per axis, got patch {self.patch_size} stride {self.stride}")


@dataclass(frozen=True)
class PatchGrid:
    origins: List[Triple]
    volume_dims: Triple
    spec: PatchSpec = field(default_factory=PatchSpec)

    def __len__(self) -> int:
        return len(self.origins)


def axis_origins(dim: int, patch: int, stride: int) -> List[int]:
    """0, s, 2s, ... with a last origin clamped to dim - patch when the stride overshoots"""
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] + patch < dim:
        origins.append(dim - patch)
    return origins


def plan_patches(dims: Sequence[int], spec: PatchSpec) -> PatchGrid:
    dims = as_triple(dims)
    for d, p in zip(dims, spec.patch_size):
        if d < p:
            raise PatchLargerThanVolume(f"Patch {spec.patch_size} does not fit volume {dims}")
    per_axis = [axis_origins(d, p, s) for d, p, s in zip(dims, spec.patch_size, spec.stride)]
    origins = [tuple(o) for o in itertools.product(*per_axis)]
    return PatchGrid(origins=origins, volume_dims=dims, spec=spec)


def extract(vol: Union[MultiModalVolume, LabelMap, np.ndarray], origin: Sequence[int],
            patch_size: Sequence[int]) -> np.ndarray:
    """Copy out one patch; a leading modality/class axis is kept"""
    if isinstance(vol, MultiModalVolume):
        array = vol.data
    elif isinstance(vol, LabelMap):
        array = vol.labels
    else:
        array = vol
    spatial = array.shape[-3:]
    origin = as_triple(origin)
    patch_size = as_triple(patch_size)
    for o, p, d in zip(origin, patch_size, spatial):
        if o < 0 or o + p > d:
            raise OriginOutOfBounds(f"Patch at {origin} of size {patch_size} leaves volume {spatial}")
    window = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    return np.array(array[(Ellipsis,) + window], copy=True)


def _ordered_patches(grid: PatchGrid, patches) -> List[Tuple[Triple, np.ndarray]]:
    if isinstance(patches, Mapping):
        items = [(tuple(o), p) for o, p in patches.items()]
        if sorted(o for o, _ in items) != sorted(grid.origins):
            raise GridMismatch("Patch origins do not match the grid")
    else:
        patches = list(patches)
        if len(patches) != len(grid.origins):
            raise GridMismatch(f"{len(patches)} patches for a grid of {len(grid.origins)} origins")
        items = list(zip(grid.origins, patches))
    # fixed accumulation order keeps fusion independent of completion order
    return sorted(items, key=lambda item: item[0])


def accumulate(grid: PatchGrid, patches) -> np.ndarray:
    """
    Count-weighted average of overlapping (K x patch) arrays over the full volume.

    Kept as a running mean, so voxels whose covering patches agree get that value exactly.
    """
    items = _ordered_patches(grid, patches)
    channels = np.asarray(items[0][1]).shape[0]
    mean = np.zeros((channels,) + grid.volume_dims, dtype=np.float64)
    count = np.zeros(grid.volume_dims, dtype=np.float64)
    for origin, patch in items:
        patch = np.asarray(patch, dtype=np.float64)
        if patch.shape != (channels,) + grid.spec.patch_size:
            raise GridMismatch(
                f"Patch at {origin} has shape {patch.shape}, expected {(channels,) + grid.spec.patch_size}")
        window = tuple(slice(o, o + p) for o, p in zip(origin, grid.spec.patch_size))
        count[window] += 1.0
        region = (slice(None),) + window
        mean[region] += (patch - mean[region]) / count[window]
    if (count == 0).any():
        raise GridMismatch("Grid leaves voxels uncovered")
    return mean


def fuse(grid: PatchGrid, patch_probs, spacing=(1.0, 1.0, 1.0)) -> ProbabilityMap:
    """Average per-patch class probabilities into a full-volume probability map"""
    return ProbabilityMap(probs=accumulate(grid, patch_probs), spacing=tuple(spacing))
