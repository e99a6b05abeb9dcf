"""Tests for the synthetic reservoir generator."""

import numpy as np
import pytest

from stpf.config import ConfigurationError, SynthConfig
from stpf.models import Property
from stpf.modules.synthgen import PRESETS, generate, laplacian, notched_mask, resolve

QUIET = {"pressure_noise": 0.0, "saturation_noise": 0.0}


def _sat_sum(data):
    return sum(data[p].frames.astype(np.float64) for p in Property if p.is_saturation)


class TestMask:
    def test_desk_notches(self):
        mask = notched_mask(16, 8, 2)
        assert int((~mask).sum()) == 12
        assert not mask[0, 0] and not mask[0, 1] and not mask[1, 0]
        assert mask[1, 1] and mask[2, 0]

    def test_symmetric(self):
        mask = notched_mask(34, 16, 3)
        np.testing.assert_array_equal(mask, mask[::-1])
        np.testing.assert_array_equal(mask, mask[:, ::-1])

    def test_no_notch(self):
        assert notched_mask(4, 3, 0).all()


class TestLaplacian:
    def test_constant_field_is_flat(self):
        mask = notched_mask(6, 5, 1)
        lap = laplacian(np.full((6, 5), 7.0), mask)
        np.testing.assert_array_equal(lap, 0.0)

    def test_sums_to_zero(self):
        mask = notched_mask(10, 7, 2)
        u = np.random.default_rng(0).standard_normal((10, 7))
        assert abs(laplacian(u, mask)[mask].sum()) < 1e-12

    def test_point_source(self):
        mask = np.ones((3, 3), dtype=bool)
        u = np.zeros((3, 3))
        u[1, 1] = 1.0
        lap = laplacian(u, mask)
        assert lap[1, 1] == -4.0
        assert lap[0, 1] == lap[1, 0] == lap[2, 1] == lap[1, 2] == 1.0
        assert lap[0, 0] == 0.0


class TestGenerate:
    def test_desk_shapes(self):
        data = generate(SynthConfig(seed=42))
        assert set(data) == set(Property)
        for fs in data.values():
            assert fs.frames.shape == (120, 16, 8)
            assert fs.n_active == 116

    def test_field_preset(self):
        data = generate(SynthConfig(preset="field", frames=24))
        assert data[Property.PRESSURE].frames.shape == (24, 34, 16)

    def test_resolve_keeps_overrides(self):
        cfg = resolve(SynthConfig(height=10, frames=5))
        assert (cfg.height, cfg.width, cfg.frames) == (10, PRESETS["desk"]["width"], 5)

    def test_saturation_closure(self):
        data = generate(SynthConfig(seed=1))
        mask = data[Property.OIL_SAT].mask
        total = _sat_sum(data)
        assert np.max(np.abs(total[:, mask] - 1.0)) <= 1e-6

    def test_saturations_in_unit_interval(self):
        data = generate(SynthConfig(seed=2))
        for p in (Property.OIL_SAT, Property.GAS_SAT, Property.WATER_SAT):
            assert data[p].frames.min() >= 0.0
            assert data[p].frames.max() <= 1.0

    def test_mask_invariance(self):
        data = generate(SynthConfig(seed=3))
        expected = notched_mask(16, 8, 2)
        for fs in data.values():
            np.testing.assert_array_equal(fs.mask, expected)
            assert np.all(fs.frames[:, ~expected] == 0.0)

    def test_seed_determinism(self):
        a = generate(SynthConfig(seed=5, frames=20))
        b = generate(SynthConfig(seed=5, frames=20))
        c = generate(SynthConfig(seed=6, frames=20))
        for p in Property:
            assert a[p].frames.tobytes() == b[p].frames.tobytes()
        assert a[Property.PRESSURE].frames.tobytes() != c[Property.PRESSURE].frames.tobytes()

    def test_conservation_without_sources(self):
        cfg = SynthConfig(injectors=[], producers=[], frames=40, seed=7)
        pressure = generate(cfg)[Property.PRESSURE]
        totals = pressure.frames[:, pressure.mask].astype(np.float64).sum(axis=1)
        np.testing.assert_allclose(totals, totals[0], rtol=1e-6)

    def test_no_diffusion_no_wells_is_constant(self):
        cfg = SynthConfig(alpha=0.0, injectors=[], producers=[], frames=10, **QUIET)
        data = generate(cfg)
        for fs in data.values():
            np.testing.assert_allclose(fs.frames, fs.frames[:1].repeat(10, axis=0), atol=1e-6)

    def test_single_injector_pressure_step(self):
        cfg = SynthConfig(
            alpha=0.0, injectors=[(4, 4)], producers=[], frames=3, pressure_rate=15.0, **QUIET
        )
        pressure = generate(cfg)[Property.PRESSURE].frames
        assert pressure[1, 4, 4] - pressure[0, 4, 4] == 15.0
        assert pressure[2, 4, 4] - pressure[0, 4, 4] == 30.0
        assert pressure[1, 4, 3] == pressure[0, 4, 3]

    def test_injection_alternates_gas_and_water(self):
        cfg = SynthConfig(
            alpha=0.0, injectors=[(4, 4)], producers=[], frames=5, cycle_period=4, **QUIET
        )
        data = generate(cfg)
        gas = data[Property.GAS_SAT].frames[:, 4, 4]
        water = data[Property.WATER_SAT].frames[:, 4, 4]
        assert gas[1] > gas[0] and gas[2] > gas[1]
        assert water[3] > water[2] and water[4] > water[3]

    def test_mirror_symmetry_without_noise(self):
        data = generate(SynthConfig(frames=30, **QUIET))
        for fs in data.values():
            np.testing.assert_array_equal(fs.frames, fs.frames[:, ::-1, :])
            np.testing.assert_array_equal(fs.frames, fs.frames[:, :, ::-1])

    def test_pressure_diffuses(self):
        cfg = SynthConfig(injectors=[(4, 4)], producers=[], frames=3, **QUIET)
        pressure = generate(cfg)[Property.PRESSURE].frames
        assert pressure[2, 4, 3] > pressure[0, 4, 3]


class TestValidation:
    @pytest.mark.parametrize("alpha", [-0.1, 0.3])
    def test_unstable_alpha(self, alpha):
        with pytest.raises(ConfigurationError, match="alpha"):
            generate(SynthConfig(alpha=alpha))

    def test_well_on_inactive_cell(self):
        with pytest.raises(ConfigurationError, match=r"injector at \(0, 0\)"):
            generate(SynthConfig(injectors=[(0, 0)]))

    def test_well_off_grid(self):
        with pytest.raises(ConfigurationError, match="producer"):
            generate(SynthConfig(producers=[(16, 2)]))

    def test_saturations_must_sum_to_one(self):
        with pytest.raises(ConfigurationError, match="sum to 1"):
            generate(SynthConfig(initial_saturation=(0.5, 0.2, 0.2)))

    def test_custom_mask_shape(self):
        with pytest.raises(ConfigurationError, match="mask shape"):
            generate(SynthConfig(mask=[[1, 1], [1, 1]]))
