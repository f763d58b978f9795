"""
Neurodevelopment assessment: tissue volumes per subject and preterm/term cohort comparison
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from errors import GroupTooSmall, HdanError, IOFailure, InvalidConfig, UnreadableFormat
from volume_io import LabelMap, load_volume

logger = logging.getLogger(__name__)

GROUPS = ('preterm', 'term')
MEASURES = ('wm_mm3', 'gm_mm3', 'csf_mm3', 'brain_mm3', 'wm_ratio')
MEASURE_TITLES = ('WM', 'GM', 'CSF', 'Brain volume', 'WM ratio')
MANIFEST_COLUMNS = ['subject_id', 'group', 'path']
MIN_GROUP_SIZE = 2


@dataclass
class SubjectVolumes:
    subject_id: str
    wm_mm3: float
    gm_mm3: float
    csf_mm3: float
    group: str = ''
    brain_mm3: float = field(init=False)
    wm_ratio: Optional[float] = field(init=False)

    def __post_init__(self):
        # brain volume excludes CSF
        self.brain_mm3 = self.wm_mm3 + self.gm_mm3
        self.wm_ratio = self.wm_mm3 / self.brain_mm3 if self.brain_mm3 > 0 else None

    @property
    def ratio_defined(self) -> bool:
        return self.wm_ratio is not None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class CohortSummary:
    groups: Tuple[str, str]
    n_per_group: Dict[str, int]
    means: Dict[str, Dict[str, float]]
    stds: Dict[str, Dict[str, float]]
    p_values: Dict[str, float]
    t_statistics: Dict[str, float]

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def tissue_volumes(lm: LabelMap, subject_id: Optional[str] = None, group: str = '') -> SubjectVolumes:
    voxel_mm3 = float(np.prod(lm.spacing))
    counts = np.bincount(lm.labels.ravel(), minlength=lm.num_classes)
    volume = {name: float(counts[lm.class_index(name)]) * voxel_mm3 for name in ('WM', 'GM', 'CSF')}
    subject = SubjectVolumes(subject_id=subject_id if subject_id is not None else lm.subject_id,
                             wm_mm3=volume['WM'], gm_mm3=volume['GM'], csf_mm3=volume['CSF'], group=group)
    if not subject.ratio_defined:
        logger.warning("%s: no WM or GM voxels, WM ratio undefined", subject.subject_id)
    return subject


def welch_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided unequal-variance t-test; (t, p) with a - b as the direction"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < MIN_GROUP_SIZE or len(b) < MIN_GROUP_SIZE:
        return float('nan'), float('nan')
    if np.var(a) == 0 and np.var(b) == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return math.copysign(math.inf, a.mean() - b.mean()), 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def cohort_compare(subjects: Sequence[SubjectVolumes], groups: Tuple[str, str] = GROUPS) -> CohortSummary:
    members = {g: [s for s in subjects if s.group == g] for g in groups}
    for g, rows in members.items():
        if len(rows) < MIN_GROUP_SIZE:
            raise GroupTooSmall(f"Group {g!r} has {len(rows)} subjects; at least {MIN_GROUP_SIZE} are needed")
    unknown = sorted({s.group for s in subjects} - set(groups))
    if unknown:
        logger.warning("Ignoring subjects in groups %s", unknown)

    values: Dict[str, Dict[str, List[float]]] = {g: {} for g in groups}
    for g, rows in members.items():
        for measure in MEASURES:
            column = [getattr(s, measure) for s in rows]
            if measure == 'wm_ratio':
                excluded = [s.subject_id for s in rows if not s.ratio_defined]
                if excluded:
                    logger.warning("Excluding undefined WM ratios from %s mean: %s", g, excluded)
                # mean of individual ratios, never the ratio of group means
                column = [v for v in column if v is not None]
            values[g][measure] = column

    means = {g: {m: float(np.mean(v)) if v else float('nan') for m, v in values[g].items()} for g in groups}
    stds = {g: {m: float(np.std(v, ddof=1)) if len(v) > 1 else float('nan') for m, v in values[g].items()}
            for g in groups}
    p_values, t_statistics = {}, {}
    for measure in MEASURES:
        t, p = welch_test(values[groups[0]][measure], values[groups[1]][measure])
        t_statistics[measure], p_values[measure] = t, p
    return CohortSummary(groups=tuple(groups), n_per_group={g: len(r) for g, r in members.items()},
                         means=means, stds=stds, p_values=p_values, t_statistics=t_statistics)


def format_volume(value: float) -> str:
    return f"{round(value):,}" if np.isfinite(value) else 'n/a'


def format_ratio(value: float) -> str:
    return f"{100 * value:.2f}%" if np.isfinite(value) else 'n/a'


def format_p(p: float) -> str:
    if not np.isfinite(p):
        return 'n/a'
    if p < 0.01:
        return '< 0.01'
    if p < 0.05:
        return '< 0.05'
    return '> 0.05'


def _cell(measure: str, mean: float, std: float, include_std: bool) -> str:
    fmt = format_ratio if measure == 'wm_ratio' else format_volume
    text = fmt(mean)
    if include_std and np.isfinite(std):
        text += f" ± {fmt(std)}"
    return text


def render_table(summary: CohortSummary, include_std: bool = False) -> str:
    """Group rows of mean volumes (mm3) and WM ratio, then the thresholded and raw p-values"""
    rows = [[''] + list(MEASURE_TITLES)]
    for g in summary.groups:
        rows.append([g.capitalize()] + [_cell(m, summary.means[g][m], summary.stds[g][m], include_std)
                                        for m in MEASURES])
    rows.append(['p-value'] + [format_p(summary.p_values[m]) for m in MEASURES])
    rows.append(['p (raw)'] + [f"{summary.p_values[m]:.4g}" for m in MEASURES])
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append('  '.join(cells).rstrip())
    counts = ', '.join(f"{g} N={summary.n_per_group[g]}" for g in summary.groups)
    lines.append(f"({counts}; Welch two-sided t-test; volumes in mm3)")
    return '\n'.join(lines)


def subjects_frame(subjects: Sequence[SubjectVolumes], summary: Optional[CohortSummary] = None) -> pd.DataFrame:
    """Per-subject table, followed by one mean row per group when a summary is given"""
    columns = ['subject_id', 'group'] + list(MEASURES)
    frame = pd.DataFrame([{c: getattr(s, c) for c in columns} for s in subjects], columns=columns)
    if summary is not None:
        means = pd.DataFrame([{'subject_id': 'mean', 'group': g, **summary.means[g]} for g in summary.groups],
                             columns=columns)
        frame = pd.concat([frame, means], ignore_index=True)
    return frame


def read_manifest(path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str)
    except FileNotFoundError as e:
        raise IOFailure(f"Cohort manifest not found: {path}") from e
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise UnreadableFormat(f"Cannot read cohort manifest {path}: {e}") from e
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise InvalidConfig(f"Cohort manifest {path} lacks columns {sorted(missing)}")
    frame['group'] = frame['group'].str.strip().str.lower()
    return frame


def assess_cohort(manifest_path, pred_dir=None, label_mapping=None) -> Tuple[List[SubjectVolumes], CohortSummary]:
    """Load every labelled subject in a cohort manifest and compare the groups"""
    manifest = read_manifest(manifest_path)
    base = Path(pred_dir) if pred_dir is not None else Path(manifest_path).parent
    subjects = []
    for row in manifest.itertuples(index=False):
        path = Path(row.path)
        if not path.is_absolute():
            path = base / path
        try:
            lm = load_volume(path, 'label', label_mapping=label_mapping)
        except HdanError as e:
            logger.warning("Skipping %s: %s", row.subject_id, e)
            continue
        subjects.append(tissue_volumes(lm, subject_id=row.subject_id, group=row.group))
    return subjects, cohort_compare(subjects)
