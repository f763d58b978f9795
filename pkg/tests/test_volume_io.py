"""
Test volume loading, label decoding, normalisation and phantoms
"""
import nibabel as nib
import numpy as np
import pytest

from errors import (
    DegenerateIntensity,
    InvalidPhantomSpec,
    IOFailure,
    ShapeMismatch,
    SpacingMissing,
    UnmappedLabelValue,
    UnreadableFormat,
)
from volume_io import (
    DEFAULT_LABEL_MAPPING,
    LabelMap,
    MultiModalVolume,
    PhantomSpec,
    generate_phantom,
    load_volume,
    normalize,
    pair_modalities,
    parse_label_mapping,
    save_labelmap,
    save_scalar_volume,
    subject_id_from_path,
)

ISEG_INTENSITIES = {0: 0, 1: 10, 2: 150, 3: 250}


def test_golden_internal_label_file(fixtures_dir):
    """Test the raw+sidecar reader on a hand-written file"""
    lm = load_volume(fixtures_dir / "golden_label.meta", 'label')

    assert lm.subject_id == 'golden'
    assert lm.spacing == (1.0, 1.0, 2.0)
    expected = np.array([[[0, 1], [2, 3]], [[3, 2], [1, 0]]], dtype=np.uint8)
    assert np.array_equal(lm.labels, expected)


def test_missing_spacing_is_an_error(fixtures_dir):
    """Test that a sidecar without spacing is rejected instead of assuming 1 mm"""
    with pytest.raises(SpacingMissing):
        load_volume(fixtures_dir / "nospacing_label.meta", 'label')


def test_nifti_header_echo(tmp_path):
    """Test that shape and spacing come from the NIfTI header"""
    path = tmp_path / "subject_T1.nii.gz"
    nib.save(nib.Nifti1Image(np.ones((64, 64, 64), dtype=np.float32), np.eye(4)), str(path))

    vol = load_volume(path, 'T1')

    assert vol.data.shape == (1, 64, 64, 64)
    assert vol.spacing == (1.0, 1.0, 1.0)
    assert vol.subject_id == 'subject'


def test_nifti_labels_default_mapping(tmp_path):
    """Test iSeg-style intensities decode to class indices voxel by voxel"""
    rng = np.random.default_rng(0)
    stored = rng.choice([0, 10, 150, 250], size=(16, 16, 16)).astype(np.uint8)
    path = tmp_path / "s1_label.nii"
    nib.save(nib.Nifti1Image(stored, np.eye(4)), str(path))

    lm = load_volume(path, 'label')

    expected = np.vectorize(DEFAULT_LABEL_MAPPING.get)(stored)
    assert np.array_equal(lm.labels, expected)
    assert set(np.unique(lm.labels)) == {0, 1, 2, 3}


def test_unmapped_label_value(tmp_path):
    """Test strict and lenient handling of an intensity outside the mapping"""
    stored = np.zeros((4, 4, 4), dtype=np.uint8)
    stored[1, 1, 1] = 42
    stored[2, 2, 2] = 250
    path = tmp_path / "bad_label.nii"
    nib.save(nib.Nifti1Image(stored, np.eye(4)), str(path))

    with pytest.raises(UnmappedLabelValue):
        load_volume(path, 'label')

    lm = load_volume(path, 'label', strict=False)
    assert lm.labels[1, 1, 1] == 0
    assert lm.labels[2, 2, 2] == 3


def test_unreadable_formats(tmp_path):
    """Test unknown extensions and bad sidecar markers"""
    with pytest.raises(UnreadableFormat):
        load_volume(tmp_path / "volume.xyz", 'T1')

    (tmp_path / "x_T1.meta").write_text("format = something-else\ndims = 1 1 1\n")
    (tmp_path / "x_T1.raw").write_bytes(b"\x00")
    with pytest.raises(UnreadableFormat):
        load_volume(tmp_path / "x_T1.meta", 'T1')


def test_truncated_voxel_block(tmp_path):
    """Test that a raw block shorter than its header promises is rejected"""
    (tmp_path / "t_T1.meta").write_text("format = hdan-raw-1\ndims = 2 2 2\nspacing_mm = 1 1 1\ndtype = f32\n")
    (tmp_path / "t_T1.raw").write_bytes(b"\x00" * 12)
    with pytest.raises(UnreadableFormat):
        load_volume(tmp_path / "t_T1.meta", 'T1')


def test_normalize_hand_values():
    """Test z-scoring over the nonzero foreground"""
    data = np.array([0.0, 1.0, 2.0, 3.0], dtype=np.float32).reshape(1, 1, 1, 4)
    vol = MultiModalVolume(data=data, spacing=(1, 1, 1), modalities=('T1',))

    out = normalize(vol)

    assert out.data[0, 0, 0, 0] == 0.0
    assert np.allclose(out.data[0, 0, 0, 1:], [-1.2247449, 0.0, 1.2247449], atol=1e-6)


def test_normalize_constant_foreground():
    """Test that zero foreground variance is reported"""
    data = np.full((1, 4, 4, 4), 5.0, dtype=np.float32)
    with pytest.raises(DegenerateIntensity):
        normalize(MultiModalVolume(data=data, spacing=(1, 1, 1), modalities=('T1',)))


def test_normalize_statistics_and_idempotence():
    """Test foreground statistics and that normalising twice changes nothing"""
    volume, _ = generate_phantom(PhantomSpec(size=(32, 32, 32), seed=1))
    once = normalize(volume)
    twice = normalize(once)

    for m in range(2):
        fg = once.foreground[m]
        assert abs(float(once.data[m][fg].astype(np.float64).mean())) <= 1e-5
        assert abs(float(once.data[m][fg].astype(np.float64).std()) - 1.0) <= 1e-4
    assert np.max(np.abs(twice.data - once.data)) <= 1e-6
    assert np.array_equal(twice.foreground, once.foreground)
    assert np.all(once.data[~once.foreground] == 0)


def test_phantom_determinism():
    """Test that one phantom spec always yields the same bytes"""
    spec = PhantomSpec(size=(64, 64, 64), contrast_delta=0.5, noise_sigma=0.0, seed=7)
    a_vol, a_lab = generate_phantom(spec)
    b_vol, b_lab = generate_phantom(spec)

    assert a_vol.data.tobytes() == b_vol.data.tobytes()
    assert a_lab.labels.tobytes() == b_lab.labels.tobytes()


@pytest.mark.parametrize("delta", [0.0, 0.1, 0.5])
def test_phantom_contrast(delta):
    """Test that the WM-GM mean gap equals delta in both modalities"""
    volume, labels = generate_phantom(PhantomSpec(size=(32, 32, 32), contrast_delta=delta, noise_sigma=0.0))
    wm, gm = labels.labels == 3, labels.labels == 2

    for m in range(2):
        gap = abs(float(volume.data[m][wm].mean()) - float(volume.data[m][gm].mean()))
        assert abs(gap - delta) <= 1e-6


def test_phantom_class_histogram():
    """Test that every class holds at least 1% of the voxels"""
    _, labels = generate_phantom(PhantomSpec())
    counts = np.bincount(labels.labels.ravel(), minlength=4)

    assert np.all(counts > 0)
    assert np.all(counts >= 0.01 * labels.labels.size)


@pytest.mark.parametrize("size", [(15, 15, 15), (40, 64, 64), (16, 16, 16)])
def test_phantom_size_validation(size):
    """Test the >= 32 and divisible-by-16 rule"""
    with pytest.raises(InvalidPhantomSpec):
        generate_phantom(PhantomSpec(size=size))


def test_internal_label_round_trip(tmp_path):
    """Test voxel-exact save and load of random labels"""
    rng = np.random.default_rng(5)
    lm = LabelMap(labels=rng.integers(0, 4, size=(16, 16, 16)).astype(np.uint8), spacing=(1.0, 0.5, 2.0),
                  subject_id='rt')
    save_labelmap(lm, tmp_path / "rt_label.meta")

    back = load_volume(tmp_path / "rt_label.meta", 'label')

    assert np.array_equal(back.labels, lm.labels)
    assert back.spacing == lm.spacing


@pytest.mark.parametrize("suffix", [".nii.gz", ".hdr"])
def test_mapped_export_round_trip(tmp_path, suffix):
    """Test export through the iSeg intensity mapping and re-import"""
    rng = np.random.default_rng(9)
    lm = LabelMap(labels=rng.integers(0, 4, size=(16, 16, 16)).astype(np.uint8))
    path = tmp_path / f"m_label{suffix}"
    save_labelmap(lm, path, intensities=ISEG_INTENSITIES)

    back = load_volume(path, 'label', label_mapping=parse_label_mapping("0:0,10:1,150:2,250:3"))

    assert np.array_equal(back.labels, lm.labels)


def test_save_into_unwritable_location(tmp_path):
    """Test that a write below a regular file raises IOFailure"""
    blocker = tmp_path / "not_a_dir"
    blocker.write_text("x")
    lm = LabelMap(labels=np.zeros((4, 4, 4), dtype=np.uint8))

    with pytest.raises(IOFailure):
        save_labelmap(lm, blocker / "out_label.meta")
    with pytest.raises(IOFailure):
        save_scalar_volume(np.zeros((4, 4, 4)), (1, 1, 1), blocker / "out_T1.meta")


def test_label_values_must_fit_classes():
    """Test the value < C invariant"""
    with pytest.raises(UnmappedLabelValue):
        LabelMap(labels=np.full((2, 2, 2), 4, dtype=np.uint8))


def test_pairing_checks_geometry():
    """Test that T1 and T2 must share a grid"""
    t1 = MultiModalVolume(np.ones((1, 4, 4, 4), dtype=np.float32), (1, 1, 1), modalities=('T1',))
    t2 = MultiModalVolume(np.ones((1, 4, 4, 8), dtype=np.float32), (1, 1, 1), modalities=('T2',))

    with pytest.raises(ShapeMismatch):
        pair_modalities(t1, t2)
    assert pair_modalities(t1, t1).data.shape == (2, 4, 4, 4)


def test_subject_id_from_path():
    """Test modality and format suffix stripping"""
    assert subject_id_from_path("/data/subject-7_T2.nii.gz") == 'subject-7'
    assert subject_id_from_path("phantom-000_label.meta") == 'phantom-000'
    assert subject_id_from_path("case_pred.hdr") == 'case'
