"""
PNG export of attention maps (blue low, red high, optionally over T1) and segmentation panels
"""
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from errors import InvalidConfig, IOFailure  # noqa: E402
from volume_io import CLASS_NAMES  # noqa: E402

logger = logging.getLogger(__name__)

COLORMAP = 'jet'
OVERLAY_ALPHA = 0.5
# BG, CSF, GM, WM
TISSUE_COLORMAP = ListedColormap(['black', 'royalblue', 'gray', 'white'])


def parse_slice(text: Optional[str], shape: Tuple[int, int, int]) -> Tuple[int, int]:
    """`axis:index`; None means the middle slice along the last axis"""
    if text is None:
        return 2, shape[2] // 2
    try:
        axis_text, index_text = text.split(':')
        axis, index = int(axis_text), int(index_text)
    except ValueError as e:
        raise InvalidConfig(f"Slice must be written axis:index, got {text!r}") from e
    if axis not in (0, 1, 2):
        raise InvalidConfig(f"Slice axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < shape[axis]:
        raise InvalidConfig(f"Slice index {index} outside 0..{shape[axis] - 1} on axis {axis}")
    return axis, index


def take_slice(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(volume, index, axis=axis)


def save_attention_slice(attention: np.ndarray, path, axis: int, index: int) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        plt.imsave(path, take_slice(attention, axis, index), cmap=COLORMAP, vmin=0.0, vmax=1.0)
    except OSError as e:
        raise IOFailure(f"Cannot write {path}: {e}") from e
    return path


def save_attention_overlay(attention: np.ndarray, t1: np.ndarray, path, axis: int, index: int) -> Path:
    if attention.shape != t1.shape:
        raise InvalidConfig(f"Attention shape {attention.shape} differs from T1 shape {t1.shape}")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        ax.imshow(take_slice(t1, axis, index), cmap='gray')
        ax.imshow(take_slice(attention, axis, index), cmap=COLORMAP, vmin=0.0, vmax=1.0, alpha=OVERLAY_ALPHA)
        ax.axis('off')
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, bbox_inches='tight', pad_inches=0)
    except OSError as e:
        raise IOFailure(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def export_attention_images(attention: np.ndarray, out_dir, stem: str, slice_spec: Optional[str] = None,
                            t1: Optional[np.ndarray] = None) -> List[Path]:
    axis, index = parse_slice(slice_spec, attention.shape)
    out_dir = Path(out_dir)
    written = [save_attention_slice(attention, out_dir / f"{stem}_attention_a{axis}_s{index}.png", axis, index)]
    if t1 is not None:
        written.append(save_attention_overlay(attention, t1, out_dir / f"{stem}_overlay_a{axis}_s{index}.png",
                                              axis, index))
    logger.info("Wrote %s", ', '.join(str(p) for p in written))
    return written


def save_segmentation_panel(t1: np.ndarray, truth: np.ndarray, pred: np.ndarray, path, axis: int,
                            index: int) -> Path:
    """T1, ground truth and prediction of one slice side by side"""
    if not t1.shape == truth.shape == pred.shape:
        raise InvalidConfig(f"Panel volumes differ in shape: T1 {t1.shape}, truth {truth.shape}, "
                            f"prediction {pred.shape}")
    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    try:
        axes[0].imshow(take_slice(t1, axis, index), cmap='gray')
        for ax, labels in zip(axes[1:], (truth, pred)):
            ax.imshow(take_slice(labels, axis, index), cmap=TISSUE_COLORMAP, vmin=0,
                      vmax=len(CLASS_NAMES) - 1, interpolation='nearest')
        for ax, title in zip(axes, ('T1', 'Ground truth', 'Prediction')):
            ax.set_title(title)
            ax.axis('off')
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, bbox_inches='tight')
    except OSError as e:
        raise IOFailure(f"Cannot write {path}: {e}") from e
    finally:
        plt.close(fig)
    logger.info("Wrote %s", path)
    return path
