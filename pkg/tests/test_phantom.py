import numpy as np
import pytest

from lesionkit import connected_components_18
from lesionkit.phantom import (
    CohortSpec,
    PhantomConfig,
    SphereSpec,
    cohort,
    config_from_dict,
    generate,
)


def single_lesion_config(seed=0, dims=(16, 16, 16), peak=10.0):
    return PhantomConfig(
        dims=dims,
        spacing=(2, 2, 2),
        seed=seed,
        lesions=(SphereSpec(center=(8, 8, 8), radius_mm=6.0, peak_suv=peak),),
        background_suv_mean=0.5,
        background_noise_sd=0.1,
    )


def test_generate_is_deterministic():
    a = generate(single_lesion_config())
    b = generate(single_lesion_config())
    assert a.id == b.id
    for va, vb in ((a.pet, b.pet), (a.ct, b.ct), (a.gt, b.gt)):
        assert np.array_equal(va.data, vb.data)


def test_generate_component_count_matches_lesions():
    cfg = PhantomConfig(
        dims=(32, 32, 32),
        spacing=(2, 2, 2),
        seed=3,
        lesions=(
            SphereSpec(center=(8, 8, 8), radius_mm=6.0, peak_suv=8.0),
            SphereSpec(center=(22, 22, 22), radius_mm=5.0, peak_suv=6.0),
            SphereSpec(center=(8, 22, 8), radius_mm=4.0, peak_suv=7.0),
        ),
    )
    case = generate(cfg)
    assert connected_components_18(case.gt).count == 3


def test_generate_suvmax_tracks_peak():
    for seed in range(10):
        case = generate(single_lesion_config(seed=seed))
        suvmax = case.pet.data[case.gt.data > 0].max()
        assert 9.0 <= suvmax <= 11.0


def test_generate_value_ranges_and_traps():
    cfg = PhantomConfig(
        dims=(24, 24, 24),
        spacing=(2, 2, 2),
        seed=5,
        lesions=(SphereSpec(center=(6, 6, 6), radius_mm=5.0, peak_suv=8.0),),
        traps=(SphereSpec(center=(17, 17, 17), radius_mm=7.0, peak_suv=14.0),),
    )
    case = generate(cfg)
    assert (case.pet.data >= 0).all()
    assert (case.ct.data >= 0).all() and (case.ct.data <= 1).all()
    # the trap is hot but contributes no ground truth
    trap_center = case.gt.flat_index(17, 17, 17)
    assert case.pet.data[trap_center] > 10
    assert case.gt.data[trap_center] == 0.0


def test_generate_default_config_is_imbalanced():
    cfg = PhantomConfig(
        seed=1,
        lesions=(SphereSpec(center=(16, 16, 16), radius_mm=6.0, peak_suv=8.0),),
    )
    case = generate(cfg)
    assert 0 < case.gt.data.mean() < 0.01


def test_config_rejections():
    with pytest.raises(ValueError, match="fit"):
        PhantomConfig(dims=(8, 8, 8), lesions=(SphereSpec((1, 1, 1), 6.0, 5.0),))
    with pytest.raises(ValueError, match="gt_threshold_frac"):
        PhantomConfig(gt_threshold_frac=1.0)
    # overlapping lesions merge into one core -> rejected
    with pytest.raises(ValueError, match="separable"):
        generate(PhantomConfig(
            dims=(24, 24, 24), spacing=(2, 2, 2),
            lesions=(
                SphereSpec(center=(10, 10, 10), radius_mm=6.0, peak_suv=8.0),
                SphereSpec(center=(12, 10, 10), radius_mm=6.0, peak_suv=8.0),
            ),
        ))
    # trap sitting on a lesion core -> rejected
    with pytest.raises(ValueError, match="trap"):
        generate(PhantomConfig(
            dims=(24, 24, 24), spacing=(2, 2, 2),
            lesions=(SphereSpec(center=(10, 10, 10), radius_mm=6.0, peak_suv=8.0),),
            traps=(SphereSpec(center=(11, 10, 10), radius_mm=6.0, peak_suv=12.0),),
        ))


def base_cohort_config():
    return PhantomConfig(
        dims=(24, 24, 24),
        spacing=(2, 2, 2),
        lesions=(SphereSpec(center=(12, 12, 12), radius_mm=6.0, peak_suv=9.0),),
        traps=(SphereSpec(center=(6, 6, 6), radius_mm=7.0, peak_suv=12.0),),
        background_suv_mean=0.4,
        background_noise_sd=0.1,
    )


def test_cohort_deterministic_and_split():
    spec = CohortSpec(n_cases=10, single_fraction=0.5, seed=11)
    a = cohort(base_cohort_config(), spec)
    b = cohort(base_cohort_config(), spec)
    assert [c.id for c in a] == [f"case{i:03d}" for i in range(10)]
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.pet.data, cb.pet.data)
        assert np.array_equal(ca.gt.data, cb.gt.data)
    counts = [connected_components_18(c.gt).count for c in a]
    assert sum(1 for c in counts if c == 1) == 5
    assert all(c >= 2 for c in counts[5:])


def test_cohort_rejects_bad_specs():
    with pytest.raises(ValueError, match="n_cases"):
        CohortSpec(n_cases=0)
    with pytest.raises(ValueError, match="prototype"):
        cohort(PhantomConfig(), CohortSpec(n_cases=2))


def test_config_from_dict():
    obj = {
        "dims": [16, 16, 16],
        "spacing": [2, 2, 2],
        "seed": 4,
        "lesions": [{"center": [8, 8, 8], "radius_mm": 6.0, "peak_suv": 10.0}],
        "background_suv_mean": 0.5,
    }
    base, spec = config_from_dict(obj)
    assert spec is None
    assert base.lesions[0].center == (8, 8, 8)
    generate(base)  # parses to a generable config

    obj["cohort"] = {"n_cases": 4, "single_fraction": 1.0}
    base, spec = config_from_dict(obj)
    assert spec.n_cases == 4
    with pytest.raises(ValueError, match="unknown config keys"):
        config_from_dict({"dims": [8, 8, 8], "bogus": 1})
