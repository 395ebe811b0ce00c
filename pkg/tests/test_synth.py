import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jema import synth
from jema.meltpool_vision import measure_frame, measure_lh, threshold_mask
from jema.synth import (
    AugmentParams,
    DoeGrid,
    FrameRecord,
    GeneratorSettings,
    NormalizationConstants,
    apply_augment,
    augment,
    denormalize,
    generate_dataset,
    normalize,
    read_manifest,
    render_frame,
    response_surface,
    validate_manifest,
)

GOLDEN = json.loads((Path(__file__).parent / "golden" / "response_surface_corners.json").read_text())
NORM = NormalizationConstants(p_min=800.0, p_max=2000.0, v_min=4.0, v_max=10.0, l_max=200.0, h_max=80.0)


class TestResponseSurface:
    def test_golden_corners(self):
        for key, want in GOLDEN["corners"].items():
            p, v = map(float, key.split(","))
            L, H = response_surface(p, v)
            assert L == pytest.approx(want["length_px"], rel=1e-12)
            assert H == pytest.approx(want["height_px"], rel=1e-12)

    def test_monotone_on_grid(self):
        g = DoeGrid()
        assert response_surface(2000, 4)[0] > response_surface(800, 4)[0]
        for p in g.powers:
            assert response_surface(p, 4)[1] > response_surface(p, 10)[1]
        for v in g.velocities:
            Ls = [response_surface(p, v)[0] for p in g.powers]
            Hs = [response_surface(p, v)[1] for p in g.powers]
            assert Ls == sorted(Ls) and Hs == sorted(Hs)

    @given(st.floats(100, 5000), st.floats(0.5, 50), st.floats(1.01, 2.0))
    def test_monotone_everywhere(self, p, v, k):
        L, H = response_surface(p, v)
        assert response_surface(p * k, v)[0] > L
        assert response_surface(p, v * k)[0] < L
        assert response_surface(p, v * k)[1] < H

    @pytest.mark.parametrize("p,v", [(0, 4), (800, 0), (-1, 4)])
    def test_rejects_nonpositive(self, p, v):
        with pytest.raises(ValueError):
            response_surface(p, v)


class TestDoeGrid:
    def test_default_cells(self):
        cells = DoeGrid().cells()
        assert len(cells) == 28
        assert cells[0] == (800.0, 4.0) and cells[-1] == (2000.0, 10.0)

    @pytest.mark.parametrize("kw", [{"powers": ()}, {"velocities": (4, 4)}, {"powers": (2000, 800)}, {"velocities": (0, 1)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DoeGrid(**kw)


class TestRender:
    @pytest.mark.parametrize("modality", ["on_axis", "off_axis"])
    def test_contract_and_determinism(self, modality):
        a = render_frame(1400, 6, modality, rng_seed=3, noise=0.02, frame_id="x")
        b = render_frame(1400, 6, modality, rng_seed=3, noise=0.02, frame_id="x")
        assert a.shape == (320, 320)
        assert 0 <= a.min() and a.max() <= 1
        assert np.array_equal(a, b)
        assert not np.array_equal(a, render_frame(1400, 6, modality, rng_seed=4, noise=0.02, frame_id="x"))

    def test_modalities_differ(self):
        assert not np.array_equal(render_frame(1400, 6, "on_axis", 0), render_frame(1400, 6, "off_axis", 0))

    def test_thermal_isotherm_margin(self):
        L, H = response_surface(1200, 8)
        temps = synth.intensity_to_celsius(render_frame(1200, 8, "off_axis", 0))
        r, _, _ = synth._ellipse_radius(temps.shape, (159.5, 159.5), (L / 2, H / 2))
        assert temps[r <= 1].min() >= 1300 - 4  # 8-bit quantization step is ~7.8 degC
        assert temps[r > 1].max() <= 1100 + 4

    @pytest.mark.parametrize("p,v", DoeGrid().cells())
    def test_measurement_round_trip(self, p, v):
        L, H = response_surface(p, v)
        temps = synth.intensity_to_celsius(render_frame(p, v, "off_axis", 0))
        m = measure_lh(threshold_mask(temps))
        assert abs(m.length_px - L) <= 1.0 and abs(m.height_px - H) <= 1.0
        # the 5x5 median trims the one-pixel tips of the ellipse
        m = measure_frame(temps)
        assert abs(m.length_px - L) <= 1.5 and abs(m.height_px - H) <= 1.5

    def test_geometry_override(self):
        m = measure_frame(synth.intensity_to_celsius(render_frame(1000, 6, "off_axis", 0, geometry=(150.0, 40.0))))
        assert abs(m.length_px - 150) <= 1 and abs(m.height_px - 40) <= 1


class TestAugment:
    def test_identity_is_resize(self):
        from skimage.transform import resize

        img = render_frame(1400, 6, "on_axis", 0)
        out = apply_augment(img, AugmentParams())
        assert np.allclose(out, np.clip(resize(img, (224, 224), anti_aliasing=True, preserve_range=True), 0, 1))

    def test_same_rng_same_output(self):
        img = render_frame(1400, 6, "off_axis", 0)
        a = augment(img, np.random.default_rng(5))
        b = augment(img, np.random.default_rng(5))
        assert np.array_equal(a, b)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_shape_range_dtype(self, seed):
        img = np.random.default_rng(seed).random((320, 320)).astype(np.float32)
        out = augment(img, np.random.default_rng(seed))
        assert out.shape == (224, 224) and out.dtype == np.float32
        assert 0 <= out.min() and out.max() <= 1

    def test_flip(self):
        img = np.zeros((320, 320))
        img[:, :10] = 1
        out = apply_augment(img, AugmentParams(hflip=True))
        assert out[:, -1].mean() > 0.9 and out[:, 0].mean() < 0.1

    def test_parameter_ranges(self):
        rng = np.random.default_rng(0)
        draws = [synth.sample_augment_params(rng) for _ in range(500)]
        assert all(abs(d.angle_deg) <= 20 for d in draws)
        assert all(abs(s) <= 0.05 for d in draws for s in d.shift_frac)
        assert 0.4 < np.mean([d.hflip for d in draws]) < 0.6

    def test_wrong_size(self):
        with pytest.raises(ValueError):
            augment(np.zeros((224, 224)), np.random.default_rng(0))


def rec(p=1400.0, v=7.0, L=100.0, H=40.0):
    return FrameRecord("f", "a.png", "b.png", p, v, L, H)


class TestNormalize:
    def test_examples(self):
        assert normalize(rec(p=800), NORM)[0] == 0
        assert normalize(rec(p=2000), NORM)[0] == 1
        assert normalize(rec(p=1400), NORM)[0] == 0.5
        assert normalize(rec(L=200), NORM)[2] == 1

    def test_out_of_range_lists_fields(self):
        with pytest.raises(ValueError, match="power_w.*height_px"):
            normalize(rec(p=2500, H=90), NORM)

    @given(st.floats(800, 2000), st.floats(4, 10), st.floats(0, 200), st.floats(0, 80))
    def test_round_trip(self, p, v, L, H):
        back = denormalize(*normalize(rec(p, v, L, H), NORM), NORM)
        assert np.allclose(back, (p, v, L, H), rtol=0, atol=1e-9)

    def test_constants_validated(self):
        with pytest.raises(ValueError):
            NormalizationConstants(2000, 800, 4, 10, 1, 1)

    def test_json_round_trip(self, tmp_path):
        NORM.save(tmp_path / "n.json")
        assert NormalizationConstants.load(tmp_path / "n.json") == NORM


def digest(root):
    h = hashlib.sha256()
    for f in sorted(Path(root).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


SMALL = DoeGrid(velocities=(4.0, 10.0), powers=(800.0, 1400.0, 2000.0))


class TestGenerateDataset:
    def test_rows_files_and_invariants(self, tmp_path):
        manifest = generate_dataset(SMALL, 3, tmp_path / "d", seed=1)
        records, root = read_manifest(manifest)
        assert len(records) == 18
        assert manifest.read_text().splitlines()[0] == ",".join(synth.MANIFEST_COLUMNS)
        validate_manifest(manifest, SMALL)
        assert NormalizationConstants.load(root / "norm.json") == NormalizationConstants.from_records(records)
        assert all(not Path(r.on_axis_path).is_absolute() for r in records)

    def test_default_grid_row_count(self, tmp_path):
        manifest = generate_dataset(DoeGrid(), 1, tmp_path, seed=0)
        assert len(read_manifest(manifest)[0]) == 28

    def test_byte_identical_rerun(self, tmp_path):
        generate_dataset(SMALL, 2, tmp_path / "a", seed=4)
        generate_dataset(SMALL, 2, tmp_path / "b", seed=4)
        assert digest(tmp_path / "a") == digest(tmp_path / "b")
        generate_dataset(SMALL, 2, tmp_path / "c", seed=5)
        assert (tmp_path / "a" / "manifest.csv").read_bytes() != (tmp_path / "c" / "manifest.csv").read_bytes()

    def test_frames_independent_of_cell_count(self, tmp_path):
        # per-frame rng depends on (seed, frame_id) only
        generate_dataset(SMALL, 2, tmp_path / "a", seed=4)
        generate_dataset(SMALL, 3, tmp_path / "b", seed=4)
        f = "images/off_axis/c01_f0001.png"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_outliers_injected(self, tmp_path):
        s = GeneratorSettings(noise=0.0, label_noise=0.0, outlier_fraction=1.0)
        records, _ = read_manifest(generate_dataset(SMALL, 2, tmp_path, seed=0, settings=s))
        for r in records:
            ratio = r.length_px / response_surface(r.power_w, r.velocity_mm_s)[0]
            assert ratio == pytest.approx(0.6, abs=1e-4) or ratio == pytest.approx(1.45, abs=1e-4) or r.length_px == 308.0

    def test_jitter_bounds(self, tmp_path):
        s = GeneratorSettings(jitter=0.05)
        manifest = generate_dataset(SMALL, 2, tmp_path, seed=0, settings=s)
        validate_manifest(manifest, SMALL, jitter=0.05)
        with pytest.raises(ValueError, match="outside grid"):
            validate_manifest(manifest, SMALL, jitter=0.0)

    def test_validate_catches_missing_image(self, tmp_path):
        manifest = generate_dataset(SMALL, 1, tmp_path, seed=0)
        (tmp_path / "images" / "on_axis" / "c00_f0000.png").unlink()
        with pytest.raises(ValueError, match="c00_f0000"):
            validate_manifest(manifest)

    def test_bad_manifest_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="expected columns"):
            read_manifest(tmp_path / "m.csv")

    def test_frames_per_cell_validated(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(SMALL, 0, tmp_path)
