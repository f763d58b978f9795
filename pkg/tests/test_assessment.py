"""
Test tissue volumes, cohort statistics and the cohort table
"""
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from assessment import (
    MEASURES,
    CohortSummary,
    SubjectVolumes,
    assess_cohort,
    cohort_compare,
    format_p,
    format_ratio,
    format_volume,
    render_table,
    subjects_frame,
    tissue_volumes,
    welch_test,
)
from errors import GroupTooSmall, InvalidConfig
from volume_io import LabelMap, save_labelmap

PRETERM_MEANS = {'wm_mm3': 649_152.0, 'gm_mm3': 695_123.0, 'csf_mm3': 474_353.0,
                 'brain_mm3': 1_344_275.0, 'wm_ratio': 0.4815}
TERM_MEANS = {'wm_mm3': 672_657.0, 'gm_mm3': 742_677.0, 'csf_mm3': 425_307.0,
              'brain_mm3': 1_415_334.0, 'wm_ratio': 0.4742}


def labels_with(wm=0, gm=0, csf=0, shape=(10, 10, 10), spacing=(1.0, 1.0, 1.0), subject_id='s'):
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    flat[:wm] = 3
    flat[wm:wm + gm] = 2
    flat[wm + gm:wm + gm + csf] = 1
    return LabelMap(labels=flat.reshape(shape), spacing=spacing, subject_id=subject_id)


def cohort(values_a, values_b):
    """Subjects whose WM volume carries the given values, GM fixed at 100"""
    subjects = [SubjectVolumes(f"a{i}", wm_mm3=v, gm_mm3=100.0, csf_mm3=50.0, group='preterm')
                for i, v in enumerate(values_a)]
    subjects += [SubjectVolumes(f"b{i}", wm_mm3=v, gm_mm3=100.0, csf_mm3=50.0, group='term')
                 for i, v in enumerate(values_b)]
    return subjects


def test_tissue_volumes_unit_and_scaled_spacing():
    """Test voxel counts times voxel volume"""
    unit = tissue_volumes(labels_with(wm=10, gm=5, csf=3))
    scaled = tissue_volumes(labels_with(wm=10, gm=5, csf=3, spacing=(2.0, 2.0, 2.0)))

    assert (unit.wm_mm3, unit.gm_mm3, unit.csf_mm3) == (10.0, 5.0, 3.0)
    assert scaled.wm_mm3 == 80.0
    assert unit.brain_mm3 == 15.0
    assert scaled.wm_ratio == unit.wm_ratio == pytest.approx(10 / 15)


def test_volume_additivity():
    """Test that the tissue and background volumes fill the extent"""
    lm = labels_with(wm=100, gm=200, csf=50, spacing=(0.5, 1.0, 2.0))
    volumes = tissue_volumes(lm)
    background = np.count_nonzero(lm.labels == 0) * 1.0

    assert volumes.wm_mm3 + volumes.gm_mm3 + volumes.csf_mm3 + background == pytest.approx(1000.0)


def test_brain_volume_from_reference_counts():
    """Test brain = WM + GM on the reference preterm mean counts"""
    subject = SubjectVolumes('p', wm_mm3=649_152.0, gm_mm3=695_123.0, csf_mm3=474_353.0)
    assert subject.brain_mm3 == 1_344_275.0


def test_undefined_ratio():
    """Test that an empty brain leaves the WM ratio undefined"""
    subject = tissue_volumes(labels_with(csf=10))
    assert subject.brain_mm3 == 0.0
    assert subject.wm_ratio is None


def test_mean_of_ratios():
    """Test that the group ratio is the mean of individual ratios"""
    subjects = [
        SubjectVolumes('a', wm_mm3=1, gm_mm3=3, csf_mm3=0, group='preterm'),
        SubjectVolumes('b', wm_mm3=1, gm_mm3=1, csf_mm3=0, group='preterm'),
        SubjectVolumes('c', wm_mm3=1, gm_mm3=1, csf_mm3=0, group='term'),
        SubjectVolumes('d', wm_mm3=2, gm_mm3=2, csf_mm3=0, group='term'),
    ]

    summary = cohort_compare(subjects)

    assert summary.means['preterm']['wm_ratio'] == pytest.approx(0.375)
    assert summary.means['preterm']['wm_ratio'] != pytest.approx(2 / 6)


def test_identical_groups():
    """Test t = 0 and p = 1 for identical groups"""
    summary = cohort_compare(cohort([10.0, 12.0, 14.0], [10.0, 12.0, 14.0]))

    for measure in MEASURES:
        assert summary.p_values[measure] == pytest.approx(1.0)
        assert summary.t_statistics[measure] == pytest.approx(0.0)
    assert format_p(summary.p_values['wm_mm3']) == '> 0.05'


def test_welch_against_reference():
    """Test well-separated groups against a hand-computed Welch statistic"""
    rng = np.random.default_rng(0)
    a = 10 + 0.1 * rng.standard_normal(10)
    b = 20 + 0.1 * rng.standard_normal(10)

    t, p = welch_test(a, b)

    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t_ref = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p_ref = 2 * stats.t.sf(abs(t_ref), df)
    assert t == pytest.approx(t_ref, rel=1e-9)
    assert p == pytest.approx(p_ref, rel=1e-6, abs=1e-300)
    assert p < 1e-6


def test_welch_zero_variance():
    """Test constant groups: equal means give p 1, different means give p 0"""
    assert welch_test([5.0, 5.0], [5.0, 5.0]) == (0.0, 1.0)
    t, p = welch_test([4.0, 4.0], [5.0, 5.0])
    assert t == -math.inf and p == 0.0


def test_swapping_groups_negates_t():
    """Test the direction of the statistic"""
    subjects = cohort([10.0, 11.0, 13.0], [14.0, 15.0, 19.0, 16.0])
    swapped = [SubjectVolumes(s.subject_id, s.wm_mm3, s.gm_mm3, s.csf_mm3,
                              group='term' if s.group == 'preterm' else 'preterm') for s in subjects]

    a, b = cohort_compare(subjects), cohort_compare(swapped)

    assert b.t_statistics['wm_mm3'] == pytest.approx(-a.t_statistics['wm_mm3'])
    assert b.p_values['wm_mm3'] == pytest.approx(a.p_values['wm_mm3'])


def test_group_too_small():
    """Test that each group needs two subjects"""
    with pytest.raises(GroupTooSmall):
        cohort_compare(cohort([10.0], [10.0, 12.0]))


def test_undefined_ratio_excluded_from_mean():
    """Test that an empty-brain subject does not count as ratio 0"""
    subjects = cohort([100.0, 100.0], [100.0, 100.0])
    subjects.append(SubjectVolumes('empty', wm_mm3=0.0, gm_mm3=0.0, csf_mm3=10.0, group='term'))

    summary = cohort_compare(subjects)

    assert summary.means['term']['wm_ratio'] == pytest.approx(0.5)
    assert summary.n_per_group['term'] == 3


def test_formatting():
    """Test thousands separators, percentages and p thresholds"""
    assert format_volume(1_344_275.0) == '1,344,275'
    assert format_ratio(0.4815) == '48.15%'
    assert format_p(0.003) == '< 0.01'
    assert format_p(0.03) == '< 0.05'
    assert format_p(0.2) == '> 0.05'


def reference_summary():
    return CohortSummary(
        groups=('preterm', 'term'),
        n_per_group={'preterm': 18, 'term': 18},
        means={'preterm': dict(PRETERM_MEANS), 'term': dict(TERM_MEANS)},
        stds={'preterm': {m: 42_103.0 for m in MEASURES}, 'term': {m: 38_921.0 for m in MEASURES}},
        p_values={'wm_mm3': 0.003, 'gm_mm3': 0.03, 'csf_mm3': 0.2, 'brain_mm3': 0.004, 'wm_ratio': 0.5},
        t_statistics={m: 0.0 for m in MEASURES},
    )


def test_render_reference_table():
    """Test the group rows and p-value rows of the cohort table"""
    lines = [' '.join(line.split()) for line in render_table(reference_summary()).splitlines()]

    assert lines[0] == 'WM GM CSF Brain volume WM ratio'
    assert lines[1] == 'Preterm 649,152 695,123 474,353 1,344,275 48.15%'
    assert lines[2] == 'Term 672,657 742,677 425,307 1,415,334 47.42%'
    assert lines[3] == 'p-value < 0.01 < 0.05 > 0.05 < 0.01 > 0.05'
    assert lines[4] == 'p (raw) 0.003 0.03 0.2 0.004 0.5'
    assert 'preterm N=18' in lines[5]


def test_render_with_std():
    """Test the optional standard deviations"""
    table = render_table(reference_summary(), include_std=True)
    assert '649,152 ± 42,103' in table
    assert '672,657 ± 38,921' in table


def test_reference_means_from_label_maps():
    """Test that label maps whose counts average to the reference means render those digits"""
    subjects = []
    for group, means in (('preterm', PRETERM_MEANS), ('term', TERM_MEANS)):
        for i, sign in enumerate((-1, 1)):
            lm = labels_with(wm=int(means['wm_mm3']) + sign * 21_000, gm=int(means['gm_mm3']) - sign * 15_000,
                             csf=int(means['csf_mm3']) + sign * 9_000, shape=(130, 130, 130),
                             subject_id=f"{group}-{i}")
            subjects.append(tissue_volumes(lm, group=group))

    lines = [' '.join(line.split()) for line in render_table(cohort_compare(subjects)).splitlines()]

    assert lines[1].startswith('Preterm 649,152 695,123 474,353 1,344,275 ')
    assert lines[2].startswith('Term 672,657 742,677 425,307 1,415,334 ')


def test_subjects_frame_mean_rows():
    """Test per-subject rows followed by group means"""
    subjects = cohort([10.0, 20.0], [30.0, 40.0])
    frame = subjects_frame(subjects, cohort_compare(subjects))

    assert len(frame) == 6
    assert frame['subject_id'].tolist()[-2:] == ['mean', 'mean']
    assert frame.iloc[-2]['wm_mm3'] == 15.0


def test_assess_cohort_from_manifest(tmp_path):
    """Test loading labelled subjects from a manifest, skipping an unreadable one"""
    rows = []
    for i, (group, wm) in enumerate([('preterm', 100), ('preterm', 120), ('term', 200), ('term', 220)]):
        lm = labels_with(wm=wm, gm=300, csf=50, subject_id=f"s{i}")
        save_labelmap(lm, tmp_path / f"s{i}_label.meta")
        rows.append({'subject_id': f"s{i}", 'group': group, 'path': f"s{i}_label.meta"})
    rows.append({'subject_id': 'gone', 'group': 'term', 'path': 'missing_label.meta'})
    pd.DataFrame(rows).to_csv(tmp_path / "cohort.csv", index=False)

    subjects, summary = assess_cohort(tmp_path / "cohort.csv")

    assert len(subjects) == 4
    assert summary.means['preterm']['wm_mm3'] == 110.0
    assert summary.means['term']['wm_mm3'] == 210.0
    assert summary.p_values['wm_mm3'] < 0.05


def test_manifest_missing_columns(tmp_path):
    """Test that the manifest must name subject, group and path"""
    pd.DataFrame([{'subject_id': 'a', 'path': 'x'}]).to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(InvalidConfig):
        assess_cohort(tmp_path / "bad.csv")
