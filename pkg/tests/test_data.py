import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from wmoe.data import (AREA_BOUNDS, PRESETS, FamilySpec, ImageSample, benchmark, generate, preset,
                       read_dataset, write_dataset, zero_shot_split)
from wmoe.errors import FormatError, ProtocolError, SpecError


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(sorted(PRESETS)), st.integers(0, 2**31), st.sampled_from(
    [("blob",), ("scratch",), ("patch-swap",), ("blob", "scratch", "patch-swap")]))
def test_label_mask_consistency_and_area(fam, seed, defects):
    spec = dataclasses.replace(preset(fam), defects=defects)
    h, w = spec.image_size
    for s in generate(spec, 12, seed):
        area = s.mask.sum() / (h * w)
        assert s.pixels.shape == (h, w) and s.pixels.min() >= 0 and s.pixels.max() <= 1
        if s.label:
            assert AREA_BOUNDS[0] <= area <= AREA_BOUNDS[1]
        else:
            assert area == 0


def test_generation_is_reproducible():
    a = generate(preset("checkerboard"), 10, 3)
    b = generate(preset("checkerboard"), 10, 3)
    for x, y in zip(a, b):
        assert_array_equal(x.pixels, y.pixels)
        assert_array_equal(x.mask, y.mask)
    c = generate(preset("checkerboard"), 10, 4)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_anomaly_rate_zero():
    spec = dataclasses.replace(preset("noise"), anomaly_rate=0.0)
    assert all(s.label == 0 and not s.mask.any() for s in generate(spec, 8, 0))


def test_anomaly_count():
    assert sum(s.label for s in generate(preset("grating"), 20, 0)) == 10


def test_spec_validation():
    with pytest.raises(SpecError):
        FamilySpec("x", "plaid")
    with pytest.raises(SpecError):
        FamilySpec("x", "checkerboard", defects=("crack",))
    with pytest.raises(SpecError):
        FamilySpec("x", "checkerboard", defect_scale=(4.0, 100.0))
    with pytest.raises(SpecError):
        FamilySpec("x", "checkerboard", polarity="sideways")
    with pytest.raises(SpecError):
        FamilySpec.from_dict({"name": "x", "texture": "checkerboard", "colour": 1})
    with pytest.raises(SpecError):
        generate(preset("grating"), 0, 0)
    assert FamilySpec.from_dict({"preset": "noise", "name": "n2"}).texture == "filtered-noise"


def test_sample_rejects_inconsistent_label():
    with pytest.raises(FormatError):
        ImageSample(np.zeros((4, 4)), np.zeros((4, 4), dtype=np.uint8), 1, "f")


def test_zero_shot_split():
    samples = generate(preset("grating"), 4, 0) + generate(preset("noise"), 4, 0)
    tr, ev = zero_shot_split(samples, ["grating"], ["noise"])
    assert {s.family for s in tr} == {"grating"} and {s.family for s in ev} == {"noise"}
    ev2, tr2 = zero_shot_split(samples, ["noise"], ["grating"])
    assert [s.id for s in tr2] == [s.id for s in tr]
    with pytest.raises(ProtocolError):
        zero_shot_split(samples, ["grating"], ["grating", "noise"])


def test_benchmark_families_disjoint():
    tr, ev = benchmark(8, 4, seed=0)
    assert len(tr) == 8 and len(ev) == 4
    assert not {s.family for s in tr} & {s.family for s in ev}


def test_dataset_round_trip(tmp_path):
    samples = generate(preset("grating"), 6, 1)
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    for a, b in zip(samples, back):
        assert (a.id, a.family, a.label) == (b.id, b.family, b.label)
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 65535 + 1e-12
        assert_array_equal(a.mask, b.mask)


def test_dataset_errors(tmp_path):
    assert read_dataset(tmp_path) == []
    samples = generate(preset("grating"), 4, 1)
    write_dataset(samples, tmp_path)
    gone = next(tmp_path.joinpath("masks").iterdir())
    gone.unlink()
    with pytest.raises(FormatError) as ei:
        read_dataset(tmp_path)
    assert gone.name in str(ei.value)
