import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsdl import datapipe as dp
from vsdl import phantom as ph
from vsdl.errors import ConfigError, InputError

CLEAN = ph.PhantomParams(noise_std=0.0, jitter=ph.Jitter.none())


def test_clean_control_is_constant():
    s = ph.generate_stack(0, CLEAN, seed=1)
    assert s.slices.shape == (13, 64, 64)
    assert all(np.array_equal(s.slices[0], sl) for sl in s.slices)
    assert all(np.all(f == 0) for f in dp.differential(s))


def test_clean_unstable_changes_only_in_gap_band():
    params = replace(CLEAN, noise_std=0.0)
    s = ph.generate_stack(1, params, seed=2)
    rng = np.random.default_rng(2)
    layout = ph.draw_layout(1, params, rng)
    for k, frame in enumerate(dp.differential(s)):
        _, tib0, fib0 = ph.render_slice(params, layout, float(layout.gaps[k]), parts=True)
        _, tib1, fib1 = ph.render_slice(params, layout, float(layout.gaps[k + 1]), parts=True)
        # the fibula moves, the tibia does not: change lives where either fibula covers
        band = (fib0 > 0) | (fib1 > 0)
        assert np.all(tib0 == tib1)
        assert np.all(frame[~band] == 0)
        assert np.abs(frame[band]).sum() > 0


def test_generate_stack_deterministic_and_in_range():
    a = ph.generate_stack(1, seed=7)
    b = ph.generate_stack(1, seed=7)
    c = ph.generate_stack(1, seed=8)
    assert a.slices.tobytes() == b.slices.tobytes()
    assert a.slices.tobytes() != c.slices.tobytes()
    assert a.slices.min() >= 0 and a.slices.max() <= 1
    # on the 8-bit grid used on disk
    np.testing.assert_array_equal(dp.normalize(dp.denormalize(a.slices)), a.slices)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_clean_classes_separate_by_differential_mass(seed):
    assert ph.differential_mass(ph.generate_stack(0, CLEAN, seed)) == 0.0
    assert ph.differential_mass(ph.generate_stack(1, CLEAN, seed)) > 0.0


def test_unstable_gap_widens_monotonically():
    layout = ph.draw_layout(1, ph.PhantomParams(), np.random.default_rng(0))
    assert np.all(np.diff(layout.gaps) > 0)
    ctrl = ph.draw_layout(0, ph.PhantomParams(), np.random.default_rng(0))
    assert np.ptp(ctrl.gaps) <= 2 * ph.Jitter().slice_gap_px


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 1))
def test_default_geometry_never_clips(seed, label):
    params = ph.PhantomParams()
    layout = ph.draw_layout(label, params, np.random.default_rng(seed))
    img = ph.render_slice(params, layout, float(layout.gaps.max()))
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    np.testing.assert_allclose(border, ph.BACKGROUND, atol=1e-12)


def test_bad_params():
    with pytest.raises(ConfigError):
        ph.PhantomParams(side_px=8).validate()
    with pytest.raises(ConfigError):
        ph.PhantomParams(noise_std=-0.1).validate()
    with pytest.raises(ConfigError):
        ph.PhantomParams(gap_growth_px_per_slice=0.1).validate()
    with pytest.raises(ConfigError):
        ph.PhantomParams(gap_growth_px_per_slice=3.0).validate()
    with pytest.raises(InputError):
        ph.generate_stack(2)


def test_params_from_dict():
    p = ph.params_from_dict({"side_px": 96, "jitter": {"rotation_deg": 2.0}})
    assert p.side_px == 96 and p.jitter.rotation_deg == 2.0
    assert ph.params_from_dict({"jitter": 0}).jitter == ph.Jitter.none()
    with pytest.raises(ConfigError):
        ph.params_from_dict({"colour": "red"})


def test_small_cohort(tmp_path):
    m = ph.generate_cohort(tmp_path, 3, 4, seed=1)
    assert len(m.entries) == 7
    assert sum(e.label for e in m.entries) == 3
    for e in m.entries:
        st_ = dp.read_stack(tmp_path / e.dir)
        assert st_.label == e.label and st_.id == e.id
    assert dp.DatasetManifest.read(tmp_path / "manifest.json") == m


def test_degenerate_cohort_rejected_by_split(tmp_path):
    with pytest.raises(ConfigError):
        ph.generate_cohort(tmp_path, 1, 1)
    assert not (tmp_path / "manifest.json").exists()


def test_default_cohort_shape(tmp_path):
    m = ph.generate_cohort(tmp_path / "a", seed=0)
    assert len(m.entries) == 144
    c = m.counts()
    assert (c[(1, "test")], c[(0, "test")]) == (5, 10)
    assert len(list((tmp_path / "a" / "stacks").iterdir())) == 144


def test_cohort_bytes_reproducible(tmp_path):
    ph.generate_cohort(tmp_path / "a", 4, 5, seed=3)
    ph.generate_cohort(tmp_path / "b", 4, 5, seed=3)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert doc["seed"] == 3
