"""
High-level study operations returning plain dicts, shared by the CLI and the tool server
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from assessment import assess_cohort, render_table, subjects_frame, tissue_volumes
from errors import InvalidConfig, IOFailure, UnreadableFormat
from metrics import evaluate_directories, report_frame, summarize, write_report
from network import count_parameters
from training import load_checkpoint
from volume_io import (
    DEFAULT_LABEL_MAPPING,
    LabelMap,
    MultiModalVolume,
    PhantomSpec,
    generate_phantom,
    load_volume,
    normalize,
    pair_modalities,
    save_labelmap,
    save_scalar_volume,
)

logger = logging.getLogger(__name__)

PHANTOM_MANIFEST = 'manifest.csv'
DATASET_COLUMNS = ['subject_id', 't1', 't2', 'label']


def stored_intensities(label_mapping: Dict[int, int]) -> Dict[int, int]:
    """Invert an intensity -> class mapping for writing label files"""
    return {cls: value for value, cls in sorted(label_mapping.items(), reverse=True)}


def _json_number(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return None if not np.isfinite(value) else float(value)
    return value


def _clean(record: Any) -> Any:
    """NaN/inf become None so results serialize as strict JSON"""
    if isinstance(record, dict):
        return {k: _clean(v) for k, v in record.items()}
    if isinstance(record, (list, tuple)):
        return [_clean(v) for v in record]
    return _json_number(record)


class StudyManager:
    def __init__(self, base_dir: Optional[str] = None, label_mapping: Optional[Dict[int, int]] = None):
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        # None defers to each file's sidecar table, then the default mapping
        self.label_mapping = label_mapping

    def _path(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def generate_phantoms(self, out_dir: str, count: int = 1, size: int = 64, delta: float = 0.1,
                          sigma: float = 0.05, seed: int = 0) -> Dict[str, Any]:
        """Write `count` phantom T1/T2/label triples plus a manifest"""
        if count < 1:
            raise InvalidConfig(f"count must be >= 1, got {count}")
        out = self._path(out_dir)
        sizes = tuple(size) if isinstance(size, (list, tuple)) else (int(size),) * 3
        intensities = stored_intensities(self.label_mapping or DEFAULT_LABEL_MAPPING)
        rows = []
        for i in range(count):
            volume, labels = generate_phantom(PhantomSpec(size=sizes, contrast_delta=delta,
                                                          noise_sigma=sigma, seed=seed + i))
            subject_id = f"phantom-{i:03d}"
            row = {'subject_id': subject_id}
            for m, name in enumerate(volume.modalities):
                filename = f"{subject_id}_{name}.meta"
                save_scalar_volume(volume.data[m], volume.spacing, out / filename,
                                   subject_id=subject_id, modality=name)
                row[name.lower()] = filename
            row['label'] = f"{subject_id}_label.meta"
            save_labelmap(LabelMap(labels.labels, spacing=labels.spacing, subject_id=subject_id),
                          out / row['label'], intensities=intensities)
            rows.append(row)
        manifest = out / PHANTOM_MANIFEST
        try:
            pd.DataFrame(rows, columns=DATASET_COLUMNS).to_csv(manifest, index=False)
        except OSError as e:
            raise IOFailure(f"Cannot write {manifest}: {e}") from e
        logger.info("Wrote %d phantoms to %s", count, out)
        return {'out_dir': str(out), 'manifest': str(manifest), 'count': count,
                'subjects': [r['subject_id'] for r in rows]}

    def load_dataset(self, manifest: str) -> List[Tuple[MultiModalVolume, LabelMap]]:
        """Normalized (volume, labels) pairs for every row of a subject_id,t1,t2,label manifest"""
        path = self._path(manifest)
        try:
            frame = pd.read_csv(path, dtype=str)
        except FileNotFoundError as e:
            raise InvalidConfig(f"Dataset manifest not found: {path}") from e
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise UnreadableFormat(f"Cannot read dataset manifest {path}: {e}") from e
        missing = set(DATASET_COLUMNS) - set(frame.columns)
        if missing:
            raise InvalidConfig(f"Dataset manifest {path} lacks columns {sorted(missing)}")
        dataset = []
        for row in frame.itertuples(index=False):
            t1 = load_volume(path.parent / row.t1, 'T1')
            t2 = load_volume(path.parent / row.t2, 'T2')
            labels = load_volume(path.parent / row.label, 'label', label_mapping=self.label_mapping)
            dataset.append((normalize(pair_modalities(t1, t2)), labels))
        logger.info("Loaded %d subjects from %s", len(dataset), path)
        return dataset

    def evaluate_segmentations(self, pred_dir: str, truth_dir: str,
                               report_path: Optional[str] = None) -> Dict[str, Any]:
        scores, failures = evaluate_directories(self._path(pred_dir), self._path(truth_dir),
                                                label_mapping=self.label_mapping)
        if report_path:
            write_report(scores, self._path(report_path))
        frame = report_frame(scores)
        return _clean({
            'subjects': int(frame['subject_id'].nunique()),
            'failures': failures,
            'summary': summarize(frame),
            'scores': frame.to_dict(orient='records'),
            'report': str(self._path(report_path)) if report_path else None,
        })

    def assess_cohort(self, manifest: str, pred_dir: Optional[str] = None, table_path: Optional[str] = None,
                      csv_path: Optional[str] = None, include_std: bool = False) -> Dict[str, Any]:
        subjects, summary = assess_cohort(self._path(manifest),
                                          pred_dir=self._path(pred_dir) if pred_dir else None,
                                          label_mapping=self.label_mapping)
        table = render_table(summary, include_std=include_std)
        if table_path:
            target = self._path(table_path)
            try:
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_text(table + '\n', encoding='utf-8')
            except OSError as e:
                raise IOFailure(f"Cannot write {target}: {e}") from e
        if csv_path:
            target = self._path(csv_path)
            try:
                subjects_frame(subjects, summary).to_csv(target, index=False)
            except OSError as e:
                raise IOFailure(f"Cannot write {target}: {e}") from e
        return _clean({'summary': summary.to_dict(), 'table': table,
                       'subjects': [s.to_dict() for s in subjects]})

    def summarize_segmentation(self, path: str) -> Dict[str, Any]:
        lm = load_volume(self._path(path), 'label', label_mapping=self.label_mapping)
        counts = np.bincount(lm.labels.ravel(), minlength=lm.num_classes)
        result = tissue_volumes(lm).to_dict()
        result.update({'shape': list(lm.shape), 'spacing': list(lm.spacing),
                       'voxel_counts': {name: int(counts[i]) for i, name in enumerate(lm.class_names)}})
        return _clean(result)

    def describe_checkpoint(self, path: str) -> Dict[str, Any]:
        ckpt = load_checkpoint(self._path(path))
        return _clean({
            'epoch': ckpt.epoch,
            'steps': ckpt.steps,
            'created_at': ckpt.created.isoformat() if ckpt.created else None,
            'network_config': ckpt.network_config.to_dict(),
            'parameters': count_parameters(ckpt.network_config),
            'train_config': ckpt.train_config.to_dict(),
            'loss_history': ckpt.loss_history,
        })
