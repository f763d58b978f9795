"""
Volume IO: NIfTI-1, Analyze-7.5 and raw+sidecar readers/writers, intensity
normalisation and synthetic isointense phantoms
"""
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from errors import (
    BadInputShape,
    DegenerateIntensity,
    GeometryUnderflow,
    InvalidPhantomSpec,
    IOFailure,
    ShapeMismatch,
    SpacingMissing,
    UnmappedLabelValue,
    UnreadableFormat,
)

logger = logging.getLogger(__name__)

Spacing = Tuple[float, float, float]
PathLike = Union[str, Path]

CLASS_NAMES = ('BG', 'CSF', 'GM', 'WM')
MODALITIES = ('T1', 'T2', 'label')

# iSeg-style distribution codes; intensity -> class index
DEFAULT_LABEL_MAPPING = {0: 0, 10: 1, 150: 2, 250: 3}

SIDECAR_SUFFIX = '.meta'
RAW_SUFFIX = '.raw'
SIDECAR_MAGIC = 'hdan-raw-1'

_DTYPES = {
    'u8': np.dtype('<u1'),
    'i16': np.dtype('<i2'),
    'f32': np.dtype('<f4'),
}

_SUBJECT_SUFFIX = re.compile(r'_(T1|T2|label|pred|attention)$')


@dataclass(frozen=True, eq=False)
class MultiModalVolume:
    """Co-registered intensity volumes, modality axis first (M x D x H x W)"""
    data: np.ndarray
    spacing: Spacing
    subject_id: str = ''
    modalities: Tuple[str, ...] = ('T1', 'T2')
    # set by normalize(); reused so repeated normalisation keeps the same mask
    foreground: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise BadInputShape(f"Volume data must be rank 4 (M x D x H x W), got shape {self.data.shape}")
        if len(self.modalities) != self.data.shape[0]:
            raise BadInputShape(
                f"{len(self.modalities)} modality names for {self.data.shape[0]} modality channels")
        object.__setattr__(self, 'spacing', _check_spacing(self.spacing, self.subject_id))

    @property
    def spatial_shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def num_modalities(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel tissue classes (D x H x W) with values in 0..C-1"""
    labels: np.ndarray
    class_names: Tuple[str, ...] = CLASS_NAMES
    spacing: Spacing = (1.0, 1.0, 1.0)
    subject_id: str = ''

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise BadInputShape(f"Label map must be rank 3, got shape {self.labels.shape}")
        object.__setattr__(self, 'class_names', tuple(self.class_names))
        object.__setattr__(self, 'spacing', _check_spacing(self.spacing, self.subject_id))
        if self.labels.size and int(self.labels.max()) >= len(self.class_names):
            raise UnmappedLabelValue(
                f"Label value {int(self.labels.max())} outside {len(self.class_names)} classes")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, name: str) -> int:
        return self.class_names.index(name)


@dataclass(frozen=True)
class PhantomSpec:
    size: Tuple[int, int, int] = (64, 64, 64)
    contrast_delta: float = 0.1
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if len(self.size) != 3:
            raise InvalidPhantomSpec(f"Phantom size needs 3 components, got {self.size}")
        for n in self.size:
            if n < 32 or n % 16:
                raise InvalidPhantomSpec(
                    f"Phantom size {tuple(self.size)} invalid: every component must be >= 32 and divisible by 16")
        if not 0.0 <= self.contrast_delta <= 1.0:
            raise InvalidPhantomSpec(f"contrast_delta must lie in [0, 1], got {self.contrast_delta}")
        if self.noise_sigma < 0:
            raise InvalidPhantomSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _check_spacing(spacing, source: str = '') -> Spacing:
    values = tuple(float(s) for s in spacing)
    if len(values) != 3 or not all(np.isfinite(values)) or min(values) <= 0:
        raise SpacingMissing(f"Invalid voxel spacing {spacing!r} {source}".strip())
    return values


def parse_label_mapping(text: str) -> Dict[int, int]:
    """Parse 'intensity:class,...' into an intensity -> class table"""
    mapping = {}
    for item in text.replace(' ', '').split(','):
        if not item:
            continue
        intensity, sep, cls = item.partition(':')
        if not sep:
            raise UnreadableFormat(f"Malformed label mapping entry {item!r}")
        mapping[int(intensity)] = int(cls)
    return mapping


def format_label_mapping(mapping: Dict[int, int]) -> str:
    return ','.join(f"{intensity}:{cls}" for intensity, cls in sorted(mapping.items()))


def subject_id_from_path(path: PathLike) -> str:
    name = Path(path).name
    for suffix in ('.nii.gz', '.nii', '.hdr', '.img', SIDECAR_SUFFIX, RAW_SUFFIX):
        if name.endswith(suffix):
            name = name[:-len(suffix)]
            break
    return _SUBJECT_SUFFIX.sub('', name)


def detect_format(path: PathLike) -> str:
    name = Path(path).name.lower()
    if name.endswith('.nii') or name.endswith('.nii.gz'):
        return 'nifti'
    if name.endswith('.hdr') or name.endswith('.img'):
        return 'analyze'
    if name.endswith(SIDECAR_SUFFIX) or name.endswith(RAW_SUFFIX):
        return 'internal'
    raise UnreadableFormat(f"Unrecognised volume file type: {path}")


def _internal_paths(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    return path.parent / (path.stem + SIDECAR_SUFFIX), path.parent / (path.stem + RAW_SUFFIX)


def _read_sidecar(path: Path) -> Dict[str, str]:
    entries = {}
    try:
        text = path.read_text(encoding='utf-8')
    except UnicodeDecodeError as e:
        raise UnreadableFormat(f"{path}: sidecar is not text ({e})")
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise UnreadableFormat(f"{path}: malformed sidecar line {line!r}")
        entries[key.strip()] = value.strip()
    if entries.get('format') != SIDECAR_MAGIC:
        raise UnreadableFormat(f"{path}: missing '{SIDECAR_MAGIC}' format marker")
    return entries


def _read_internal(path: PathLike) -> Tuple[np.ndarray, Spacing, Dict[str, str]]:
    meta_path, raw_path = _internal_paths(path)
    if not meta_path.exists() or not raw_path.exists():
        raise IOFailure(f"Missing sidecar or voxel block for {path}")
    meta = _read_sidecar(meta_path)
    if 'spacing_mm' not in meta:
        raise SpacingMissing(f"{meta_path}: no spacing_mm entry")
    try:
        dims = tuple(int(v) for v in meta['dims'].split())
        spacing = tuple(float(v) for v in meta['spacing_mm'].split())
    except (KeyError, ValueError) as e:
        raise UnreadableFormat(f"{meta_path}: bad dims/spacing ({e})")
    dtype = _DTYPES.get(meta.get('dtype', ''))
    if dtype is None:
        raise UnreadableFormat(f"{meta_path}: unsupported dtype {meta.get('dtype')!r}")
    expected = int(np.prod(dims)) * dtype.itemsize
    if raw_path.stat().st_size != expected:
        raise UnreadableFormat(
            f"{raw_path}: {raw_path.stat().st_size} bytes, header promises {expected}")
    array = np.fromfile(raw_path, dtype=dtype).reshape(dims)
    return array, _check_spacing(spacing, str(meta_path)), meta


def _read_nibabel(path: PathLike) -> Tuple[np.ndarray, Spacing]:
    try:
        img = nib.load(str(path))
        array = np.asanyarray(img.dataobj)
    except (ImageFileError, HeaderDataError, ValueError, EOFError) as e:
        raise UnreadableFormat(f"Cannot read {path}: {e}")
    zooms = img.header.get_zooms()
    if len(zooms) < 3 or any((not np.isfinite(z)) or z <= 0 for z in zooms[:3]):
        raise SpacingMissing(f"{path}: header voxel size {tuple(zooms)} is missing or non-positive")
    if array.ndim == 4 and array.shape[3] == 1:
        array = array[..., 0]
    if array.ndim != 3:
        raise UnreadableFormat(f"{path}: expected a 3D volume, got shape {array.shape}")
    return np.asarray(array), tuple(float(z) for z in zooms[:3])


def decode_labels(values: np.ndarray, mapping: Dict[int, int], strict: bool = True,
                  source: str = '') -> np.ndarray:
    """Map stored intensities to class indices through an intensity -> class table"""
    if np.issubdtype(values.dtype, np.floating):
        rounded = np.rint(values)
        if not np.array_equal(rounded, values):
            raise UnmappedLabelValue(f"{source}: non-integer label intensities")
        values = rounded
    values = values.astype(np.int64)
    keys = np.array(sorted(mapping), dtype=np.int64)
    classes = np.array([mapping[k] for k in keys], dtype=np.uint8)
    idx = np.clip(np.searchsorted(keys, values), 0, len(keys) - 1)
    matched = keys[idx] == values
    if not matched.all():
        unmapped = sorted(int(v) for v in np.unique(values[~matched]))
        if strict:
            raise UnmappedLabelValue(f"{source}: intensities {unmapped} have no class in the label mapping")
        logger.warning("%s: intensities %s unmapped, treated as background", source, unmapped)
    return np.where(matched, classes[idx], 0).astype(np.uint8)


def load_volume(path: PathLike, modality: str,
                label_mapping: Optional[Dict[int, int]] = None,
                strict: bool = True,
                class_names: Sequence[str] = CLASS_NAMES) -> Union[MultiModalVolume, LabelMap]:
    """Load one T1/T2 intensity volume (M == 1) or a label map"""
    if modality not in MODALITIES:
        raise UnreadableFormat(f"Unknown modality {modality!r}; expected one of {MODALITIES}")
    fmt = detect_format(path)
    meta: Dict[str, str] = {}
    if fmt == 'internal':
        array, spacing, meta = _read_internal(path)
    else:
        if not Path(path).exists():
            raise IOFailure(f"No such file: {path}")
        array, spacing = _read_nibabel(path)
    subject_id = meta.get('subject_id') or subject_id_from_path(path)

    if modality == 'label':
        if label_mapping is None:
            label_mapping = parse_label_mapping(meta['labels']) if 'labels' in meta else DEFAULT_LABEL_MAPPING
        if 'class_names' in meta:
            class_names = tuple(meta['class_names'].split(','))
        labels = decode_labels(array, label_mapping, strict=strict, source=str(path))
        return LabelMap(labels=labels, class_names=tuple(class_names), spacing=spacing, subject_id=subject_id)

    data = np.asarray(array, dtype=np.float32)[np.newaxis]
    return MultiModalVolume(data=data, spacing=spacing, subject_id=subject_id, modalities=(modality,))


def pair_modalities(t1: MultiModalVolume, t2: MultiModalVolume) -> MultiModalVolume:
    """Stack single-modality T1 and T2 volumes into the 2-channel network input"""
    if t1.spatial_shape != t2.spatial_shape:
        raise ShapeMismatch(f"T1 shape {t1.spatial_shape} differs from T2 shape {t2.spatial_shape}")
    if not np.allclose(t1.spacing, t2.spacing):
        raise ShapeMismatch(f"T1 spacing {t1.spacing} differs from T2 spacing {t2.spacing}")
    return MultiModalVolume(
        data=np.concatenate([t1.data, t2.data], axis=0),
        spacing=t1.spacing,
        subject_id=t1.subject_id or t2.subject_id,
        modalities=t1.modalities + t2.modalities,
    )


def normalize(vol: MultiModalVolume) -> MultiModalVolume:
    """Z-score every modality over its nonzero foreground; background stays 0"""
    data = vol.data.astype(np.float64)
    mask = vol.foreground if vol.foreground is not None else data != 0
    out = np.zeros(data.shape, dtype=np.float32)
    for m, name in enumerate(vol.modalities):
        fg = mask[m]
        if not fg.any():
            raise DegenerateIntensity(f"{vol.subject_id} {name}: no foreground voxels")
        values = data[m][fg]
        std = values.std()
        if std == 0:
            raise DegenerateIntensity(f"{vol.subject_id} {name}: constant foreground intensity")
        out[m][fg] = (values - values.mean()) / std
    if not np.isfinite(out).all():
        raise DegenerateIntensity(f"{vol.subject_id}: non-finite values after normalisation")
    return replace(vol, data=out, foreground=mask.copy())


# per-class means, index = class (BG, CSF, GM, WM); WM/GM entries get +-delta/2
_PHANTOM_BASE = {'T1': (0.0, 0.15, 0.5, 0.5), 'T2': (0.0, 0.9, 0.5, 0.5)}
_PHANTOM_SIGN = {'T1': 1.0, 'T2': -1.0}
# outer radius of each tissue as a fraction of the half-axis
_SHELL_RADII = ((3, 0.45), (2, 0.65), (1, 0.85))
_MIN_CLASS_FRACTION = 0.01


def generate_phantom(spec: PhantomSpec) -> Tuple[MultiModalVolume, LabelMap]:
    """Concentric-ellipsoid WM/GM/CSF phantom with tunable WM-GM contrast"""
    spec.validate()
    size = tuple(int(n) for n in spec.size)
    axes = [(np.arange(n) + 0.5 - n / 2.0) / (n / 2.0) for n in size]
    grids = np.meshgrid(*axes, indexing='ij')
    radius = np.sqrt(sum(g ** 2 for g in grids))

    labels = np.zeros(size, dtype=np.uint8)
    for cls, outer in sorted(_SHELL_RADII, key=lambda item: -item[1]):
        labels[radius < outer] = cls

    counts = np.bincount(labels.ravel(), minlength=len(CLASS_NAMES))
    if (counts < _MIN_CLASS_FRACTION * labels.size).any():
        raise GeometryUnderflow(f"Size {size} cannot fit all tissue shells (class counts {counts.tolist()})")

    rng = np.random.default_rng(spec.seed)
    tissue = labels > 0
    channels = []
    for name in ('T1', 'T2'):
        means = np.array(_PHANTOM_BASE[name], dtype=np.float64)
        half = _PHANTOM_SIGN[name] * spec.contrast_delta / 2.0
        means[3] += half
        means[2] -= half
        image = means[labels]
        if spec.noise_sigma > 0:
            image[tissue] += rng.normal(0.0, spec.noise_sigma, int(tissue.sum()))
        image[tissue] = np.maximum(image[tissue], 1e-3)
        channels.append(image)

    subject_id = f"phantom-{spec.seed}"
    spacing = (1.0, 1.0, 1.0)
    volume = MultiModalVolume(data=np.stack(channels).astype(np.float32), spacing=spacing,
                              subject_id=subject_id)
    return volume, LabelMap(labels=labels, spacing=spacing, subject_id=subject_id)


def _write_internal(array: np.ndarray, spacing: Spacing, path: PathLike, dtype_code: str,
                    extra: Dict[str, str]) -> None:
    meta_path, raw_path = _internal_paths(path)
    lines = [
        f"format = {SIDECAR_MAGIC}",
        f"dims = {' '.join(str(n) for n in array.shape)}",
        f"spacing_mm = {' '.join(repr(float(s)) for s in spacing)}",
        f"dtype = {dtype_code}",
    ]
    lines.extend(f"{key} = {value}" for key, value in extra.items() if value != '')
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=_DTYPES[dtype_code]).tofile(raw_path)
    meta_path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def _write_nibabel(array: np.ndarray, spacing: Spacing, path: PathLike, fmt: str) -> None:
    affine = np.diag([*spacing, 1.0])
    image_class = nib.Nifti1Image if fmt == 'nifti' else nib.AnalyzeImage
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    nib.save(image_class(array, affine), str(path))


def save_labelmap(lm: LabelMap, path: PathLike, fmt: Optional[str] = None,
                  intensities: Optional[Dict[int, int]] = None) -> None:
    """Write a label map; `intensities` maps class index -> stored intensity"""
    fmt = fmt or detect_format(path)
    if intensities is None:
        intensities = {cls: cls for cls in range(lm.num_classes)}
    lut = np.zeros(lm.num_classes, dtype=np.int64)
    for cls, value in intensities.items():
        lut[cls] = value
    encoded = lut[lm.labels]
    dtype_code = 'u8' if encoded.min() >= 0 and encoded.max() <= 255 else 'i16'
    try:
        if fmt == 'internal':
            inverse = {value: cls for cls, value in intensities.items()}
            _write_internal(encoded, lm.spacing, path, dtype_code, {
                'labels': format_label_mapping(inverse),
                'class_names': ','.join(lm.class_names),
                'subject_id': lm.subject_id,
                'modality': 'label',
            })
        elif fmt in ('nifti', 'analyze'):
            _write_nibabel(encoded.astype(_DTYPES[dtype_code]), lm.spacing, path, fmt)
        else:
            raise UnreadableFormat(f"Unknown output format {fmt!r}")
    except OSError as e:
        raise IOFailure(f"Cannot write {path}: {e}")


def save_scalar_volume(array: np.ndarray, spacing: Spacing, path: PathLike, fmt: Optional[str] = None,
                       subject_id: str = '', modality: str = '') -> None:
    """Write a single real-valued volume (an intensity channel or an attention map)"""
    if array.ndim != 3:
        raise BadInputShape(f"Scalar volume must be rank 3, got shape {array.shape}")
    fmt = fmt or detect_format(path)
    spacing = _check_spacing(spacing, str(path))
    try:
        if fmt == 'internal':
            _write_internal(array, spacing, path, 'f32', {'subject_id': subject_id, 'modality': modality})
        elif fmt in ('nifti', 'analyze'):
            _write_nibabel(np.asarray(array, dtype=np.float32), spacing, path, fmt)
        else:
            raise UnreadableFormat(f"Unknown output format {fmt!r}")
    except OSError as e:
        raise IOFailure(f"Cannot write {path}: {e}")


def load_scalar_volume(path: PathLike) -> Tuple[np.ndarray, Spacing]:
    vol = load_volume(path, 'T1')
    return vol.data[0], vol.spacing
