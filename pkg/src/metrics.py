"""
Dice overlap and modified Hausdorff distance per tissue class, plus
directory-level evaluation reports and paired method comparison
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from errors import BothEmpty, EmptyMask, EmptySet, HdanError, IOFailure, ShapeMismatch, UnreadableFormat
from volume_io import CLASS_NAMES, LabelMap, load_volume, subject_id_from_path

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['subject_id', 'class', 'dice', 'mhd', 'flags']
FOREGROUND_CLASSES = CLASS_NAMES[1:]

MISSING_IN_TRUTH = 'missing_in_truth'
MISSING_IN_PREDICTION = 'missing_in_prediction'
MISSING_IN_BOTH = 'missing_in_both'
UNREADABLE = 'unreadable'

# 6-connectivity: face neighbours only
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)
_VOLUME_SUFFIXES = ('.meta', '.nii', '.nii.gz', '.hdr')


@dataclass(frozen=True)
class BinaryMask:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, 'voxels', np.asarray(self.voxels, dtype=bool))
        if self.voxels.ndim != 3:
            raise ShapeMismatch(f"Binary mask must be rank 3, got shape {self.voxels.shape}")

    @classmethod
    def from_labels(cls, lm: LabelMap, class_index: int) -> 'BinaryMask':
        return cls(lm.labels == class_index, lm.spacing)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.voxels))


@dataclass(frozen=True)
class BoundarySet:
    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ClassScore:
    subject_id: str
    class_name: str
    dice: Optional[float] = None
    mhd: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    def to_row(self) -> Dict[str, Any]:
        return {'subject_id': self.subject_id, 'class': self.class_name, 'dice': self.dice,
                'mhd': self.mhd, 'flags': ';'.join(self.flags)}


def dice(a: BinaryMask, g: BinaryMask) -> float:
    if a.voxels.shape != g.voxels.shape:
        raise ShapeMismatch(f"Mask shapes differ: {a.voxels.shape} vs {g.voxels.shape}")
    size_a, size_g = a.count, g.count
    if size_a + size_g == 0:
        raise BothEmpty("Dice is undefined when both masks are empty")
    overlap = int(np.count_nonzero(a.voxels & g.voxels))
    return 2 * overlap / (size_a + size_g)


def extract_boundary(mask: BinaryMask) -> BoundarySet:
    """Foreground voxels with a face neighbour outside the mask; out-of-volume counts as outside"""
    if mask.count == 0:
        raise EmptyMask("Cannot extract the boundary of an empty mask")
    interior = ndimage.binary_erosion(mask.voxels, structure=_FACE_STRUCTURE, border_value=0)
    surface = mask.voxels & ~interior
    return BoundarySet(points=np.argwhere(surface) * np.asarray(mask.spacing, dtype=np.float64))


def _directed_mean(source: BoundarySet, target: BoundarySet) -> float:
    distances, _ = cKDTree(target.points).query(source.points, k=1)
    return float(np.mean(distances))


def mhd(a: BoundarySet, g: BoundarySet) -> float:
    if len(a) == 0 or len(g) == 0:
        raise EmptySet("Modified Hausdorff distance needs two nonempty boundary sets")
    return max(_directed_mean(a, g), _directed_mean(g, a))


def evaluate_subject(pred: LabelMap, truth: LabelMap,
                     class_names: Sequence[str] = FOREGROUND_CLASSES) -> List[ClassScore]:
    """Dice and MHD for each foreground class; a missing class is flagged instead of aborting"""
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"Prediction shape {pred.shape} differs from truth shape {truth.shape}")
    if not np.allclose(pred.spacing, truth.spacing):
        raise ShapeMismatch(f"Prediction spacing {pred.spacing} differs from truth spacing {truth.spacing}")
    subject_id = truth.subject_id or pred.subject_id
    scores = []
    for name in class_names:
        index = truth.class_index(name)
        a = BinaryMask.from_labels(pred, index)
        g = BinaryMask.from_labels(truth, index)
        score = ClassScore(subject_id, name)
        try:
            score.dice = dice(a, g)
            score.mhd = mhd(extract_boundary(a), extract_boundary(g))
        except BothEmpty:
            score.flags.append(MISSING_IN_BOTH)
        except EmptyMask:
            score.flags.append(MISSING_IN_TRUTH if g.count == 0 else MISSING_IN_PREDICTION)
        if score.flags:
            logger.warning("%s: %s %s", subject_id, name, score.flags[0])
        scores.append(score)
    return scores


def _volume_files(directory: Path, suffixes: Sequence[str]) -> Dict[str, Path]:
    """Label files by subject, taking the first suffix that matches any file"""
    if not directory.is_dir():
        raise IOFailure(f"Not a directory: {directory}")
    candidates = [p for p in sorted(directory.iterdir()) if p.name.endswith(_VOLUME_SUFFIXES)]
    stems = {p: p.name.split('.')[0] for p in candidates}
    for suffix in suffixes:
        tagged = [p for p in candidates if stems[p].endswith(suffix)]
        if tagged:
            return {subject_id_from_path(p): p for p in tagged}
    untagged = [p for p in candidates if stems[p] == subject_id_from_path(p)]
    return {subject_id_from_path(p): p for p in untagged}


def evaluate_directories(pred_dir, truth_dir, label_mapping=None) -> Tuple[List[ClassScore], int]:
    """
    Pair `<subject>_pred` files with `<subject>_label` files and evaluate each subject.

    Returns the scores plus the number of subjects that could not be evaluated.
    """
    preds = _volume_files(Path(pred_dir), ('_pred', '_label'))
    truths = _volume_files(Path(truth_dir), ('_label',))
    if not truths:
        raise IOFailure(f"No label volumes found in {truth_dir}")
    scores: List[ClassScore] = []
    failures = 0
    for subject_id, truth_path in sorted(truths.items()):
        try:
            if subject_id not in preds:
                raise IOFailure(f"no prediction for {subject_id} in {pred_dir}")
            truth = load_volume(truth_path, 'label', label_mapping=label_mapping)
            pred = load_volume(preds[subject_id], 'label', label_mapping=label_mapping)
            scores.extend(evaluate_subject(pred, truth))
        except HdanError as e:
            failures += 1
            logger.warning("Skipping %s: %s", subject_id, e)
            scores.extend(ClassScore(subject_id, name, flags=[UNREADABLE]) for name in FOREGROUND_CLASSES)
    return scores, failures


def report_frame(scores: Sequence[ClassScore]) -> pd.DataFrame:
    return pd.DataFrame([s.to_row() for s in scores], columns=REPORT_COLUMNS)


def write_report(scores: Sequence[ClassScore], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        report_frame(scores).to_csv(path, index=False)
    except OSError as e:
        raise IOFailure(f"Cannot write report {path}: {e}") from e
    return path


def read_report(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, keep_default_na=True, dtype={'subject_id': str, 'flags': str})
    except (OSError, pd.errors.ParserError) as e:
        raise UnreadableFormat(f"Cannot read report {path}: {e}") from e
    missing = set(REPORT_COLUMNS) - set(frame.columns)
    if missing:
        raise UnreadableFormat(f"Report {path} lacks columns {sorted(missing)}")
    return frame


def summarize(report: Union[pd.DataFrame, Sequence[ClassScore]]) -> Dict[str, Dict[str, float]]:
    """Per-class mean and SD of dice and mhd over the subjects where they are defined"""
    frame = report if isinstance(report, pd.DataFrame) else report_frame(report)
    summary = {}
    for name in [c for c in FOREGROUND_CLASSES if c in set(frame['class'])]:
        rows = frame[frame['class'] == name]
        dice_values = pd.to_numeric(rows['dice']).dropna()
        mhd_values = pd.to_numeric(rows['mhd']).dropna()
        summary[name] = {
            'n': int(len(dice_values)),
            'dice_mean': float(dice_values.mean()) if len(dice_values) else float('nan'),
            'dice_std': float(dice_values.std()) if len(dice_values) > 1 else 0.0,
            'mhd_mean': float(mhd_values.mean()) if len(mhd_values) else float('nan'),
            'mhd_std': float(mhd_values.std()) if len(mhd_values) > 1 else 0.0,
        }
    return summary


def render_summary(summary: Dict[str, Dict[str, float]]) -> str:
    lines = [f"{'Class':<6}{'n':>4}{'Dice':>18}{'MHD':>18}"]
    for name, row in summary.items():
        lines.append(f"{name:<6}{row['n']:>4}"
                     f"{row['dice_mean']:>10.3f} ± {row['dice_std']:<5.3f}"
                     f"{row['mhd_mean']:>10.3f} ± {row['mhd_std']:<5.3f}")
    return '\n'.join(lines)


def compare_methods(report_a: pd.DataFrame, report_b: pd.DataFrame, metric: str = 'dice') -> Dict[str, Dict[str, float]]:
    """Paired two-sided t-test per class over subjects scored in both reports"""
    if metric not in ('dice', 'mhd'):
        raise ShapeMismatch(f"Unknown metric {metric!r}")
    merged = report_a.merge(report_b, on=['subject_id', 'class'], suffixes=('_a', '_b'))
    results = {}
    for name in FOREGROUND_CLASSES:
        rows = merged[merged['class'] == name][[f'{metric}_a', f'{metric}_b']].apply(pd.to_numeric).dropna()
        if len(rows) < 2:
            continue
        a, b = rows[f'{metric}_a'].to_numpy(), rows[f'{metric}_b'].to_numpy()
        if np.array_equal(a, b):
            t, p = 0.0, 1.0
        else:
            t, p = stats.ttest_rel(a, b)
        results[name] = {'n': int(len(rows)), 'mean_a': float(a.mean()), 'mean_b': float(b.mean()),
                         't_statistic': float(t), 'p_value': float(p)}
    return results
