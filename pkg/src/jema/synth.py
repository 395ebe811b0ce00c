"""Synthetic melt-pool dataset with a known process-parameter response.

Each frame pairs an off-axis thermal image (pixel intensity maps linearly to
degrees Celsius) with an on-axis visible-light image of the same melt pool.
Geometry follows a power-law surface in laser power and travel velocity,
with multiplicative per-frame scatter and a small fraction of gross
outliers, so the preprocessing and outlier rules have something to do.
"""
import csv
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.transform import resize, rotate

from .model import Modality

FRAME_SIZE = 320
AUGMENTED_SIZE = 224

# intensity 1.0 == 2000 degC; the 1250 degC isotherm sits at 0.625
CELSIUS_FULL_SCALE = 2000.0

LENGTH_COEF = 3.3
LENGTH_P_EXP, LENGTH_V_EXP = 0.6, 0.4
HEIGHT_COEF = 60.0
HEIGHT_P_EXP, HEIGHT_V_EXP = 0.15, 0.7

MANIFEST_COLUMNS = (
    "frame_id",
    "on_axis_path",
    "off_axis_path",
    "power_w",
    "velocity_mm_s",
    "length_px",
    "height_px",
)


@dataclass(frozen=True)
class DoeGrid:
    velocities: tuple = (4.0, 6.0, 8.0, 10.0)
    powers: tuple = (800.0, 1000.0, 1200.0, 1400.0, 1600.0, 1800.0, 2000.0)

    def __post_init__(self):
        for name in ("velocities", "powers"):
            values = tuple(float(x) for x in getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be nonempty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            if values[0] <= 0:
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, values)

    def cells(self):
        """(power, velocity) pairs, velocity-major."""
        return [(p, v) for v in self.velocities for p in self.powers]


@dataclass
class FrameRecord:
    frame_id: str
    on_axis_path: str
    off_axis_path: str
    power_w: float
    velocity_mm_s: float
    length_px: float
    height_px: float

    @property
    def cell(self):
        return (self.power_w, self.velocity_mm_s)

    def path(self, modality):
        return self.on_axis_path if Modality(modality) is Modality.ON_AXIS else self.off_axis_path


@dataclass(frozen=True)
class NormalizationConstants:
    p_min: float
    p_max: float
    v_min: float
    v_max: float
    l_max: float
    h_max: float

    def __post_init__(self):
        if not self.p_max > self.p_min:
            raise ValueError("p_max must exceed p_min")
        if not self.v_max > self.v_min:
            raise ValueError("v_max must exceed v_min")
        if not (self.l_max > 0 and self.h_max > 0):
            raise ValueError("l_max and h_max must be positive")

    @classmethod
    def from_records(cls, records):
        p = [r.power_w for r in records]
        v = [r.velocity_mm_s for r in records]
        return cls(
            p_min=min(p),
            p_max=max(p),
            v_min=min(v),
            v_max=max(v),
            l_max=max(r.length_px for r in records),
            h_max=max(r.height_px for r in records),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        data = json.loads(Path(path).read_text())
        return cls(**{f.name: float(data[f.name]) for f in fields(cls)})


def response_surface(power_w, velocity_mm_s):
    """Ground-truth melt-pool (length, height) in pixels of a 320x320 frame."""
    if not (power_w > 0 and velocity_mm_s > 0):
        raise ValueError(f"power and velocity must be positive, got {power_w}, {velocity_mm_s}")
    length = LENGTH_COEF * power_w**LENGTH_P_EXP / velocity_mm_s**LENGTH_V_EXP
    height = HEIGHT_COEF * power_w**HEIGHT_P_EXP / velocity_mm_s**HEIGHT_V_EXP
    return length, height


def celsius_to_intensity(temps):
    return np.asarray(temps, dtype=float) / CELSIUS_FULL_SCALE


def intensity_to_celsius(image):
    return np.asarray(image, dtype=float) * CELSIUS_FULL_SCALE


def _quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _ellipse_radius(shape, center, semi_axes):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(float)
    cy, cx = center
    a, b = semi_axes
    return np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2), xx - cx, yy - cy


def render_thermal(length_px, height_px, center=None, noise=0.0, rng=None, spatter=False):
    """Off-axis thermal frame: a hot ellipse whose boundary is the 1250 degC isotherm.

    Every pixel centre inside the ellipse reads at least 1300 degC and every
    pixel outside at most 1100 degC, so the thresholded bounding box equals
    the ellipse extent up to rasterization. The centre is cooler than its
    surroundings (emissivity dip) but stays above the isotherm.
    """
    if center is None:
        center = ((FRAME_SIZE - 1) / 2, (FRAME_SIZE - 1) / 2)
    r, _, _ = _ellipse_radius((FRAME_SIZE, FRAME_SIZE), center, (length_px / 2, height_px / 2))
    inside = 1300.0 + 600.0 * (1 - r**2) - 250.0 * np.exp(-((r / 0.35) ** 2))
    outside = 1100.0 * np.exp(-3.0 * (r - 1)) + 40.0 * np.exp(-(r - 1))
    temps = np.where(r <= 1.0, np.maximum(inside, 1300.0), np.minimum(outside, 1100.0))
    img = celsius_to_intensity(temps)
    if spatter and rng is not None:
        # a small hot particle away from the pool
        sy, sx = rng.integers(10, FRAME_SIZE - 10, size=2)
        if r[sy, sx] > 1.5:
            img[sy - 1 : sy + 2, sx - 1 : sx + 2] = celsius_to_intensity(1500.0)
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return _quantize(img)


def render_on_axis(length_px, height_px, power_w, center=None, noise=0.0, rng=None, p_range=(800.0, 2000.0)):
    """On-axis frame: glowing ring around the pool plus a cooling tail behind it."""
    if center is None:
        center = ((FRAME_SIZE - 1) / 2, (FRAME_SIZE - 1) / 2)
    a, b = 0.45 * length_px, 0.8 * height_px
    r, dx, dy = _ellipse_radius((FRAME_SIZE, FRAME_SIZE), center, (a, b))
    brightness = 0.45 + 0.4 * np.clip((power_w - p_range[0]) / (p_range[1] - p_range[0]), 0, 1)
    ring = brightness * np.exp(-(((r - 1.0) / 0.12) ** 2))
    core = 0.55 * brightness * (r < 1.0) * (1.0 - 0.5 * r**2)
    tail_len = 0.8 * length_px
    behind = np.clip(-(dx + a) / tail_len, 0, None)
    tail = 0.5 * brightness * np.exp(-((dy / (0.35 * height_px)) ** 2)) * np.exp(-3 * behind) * (dx < 0) * (r > 1)
    img = 0.04 + np.maximum(ring, core) + tail
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return _quantize(img)


def frame_rng(seed, frame_id):
    """Per-frame generator; identical whether frames are made serially or in parallel."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(frame_id.encode()),)))


def render_frame(power_w, velocity_mm_s, modality, rng_seed, noise=0.0, geometry=None, frame_id="frame"):
    """Render one 320x320 image in [0, 1] for the given process parameters.

    ``geometry`` overrides the response-surface (length, height), e.g. to
    render a frame with per-frame scatter. With ``noise == 0`` the output is
    a clean, centred render.
    """
    length, height = geometry if geometry is not None else response_surface(power_w, velocity_mm_s)
    rng = frame_rng(rng_seed, f"{frame_id}/{Modality(modality).value}")
    center = None
    if noise > 0:
        c = (FRAME_SIZE - 1) / 2
        center = (c + rng.uniform(-4, 4), c + rng.uniform(-4, 4))
    if Modality(modality) is Modality.OFF_AXIS:
        return render_thermal(length, height, center, noise, rng, spatter=noise > 0 and rng.random() < 0.3)
    return render_on_axis(length, height, power_w, center, noise, rng)


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle_deg: float = 0.0
    shift_frac: tuple = (0.0, 0.0)


def sample_augment_params(rng, max_angle=20.0, max_shift=0.05):
    return AugmentParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        shift_frac=(float(rng.uniform(-max_shift, max_shift)), float(rng.uniform(-max_shift, max_shift))),
    )


def apply_augment(image, params, out_size=AUGMENTED_SIZE):
    image = np.asarray(image)
    if image.shape != (FRAME_SIZE, FRAME_SIZE):
        raise ValueError(f"augment expects a {FRAME_SIZE}x{FRAME_SIZE} image, got {image.shape}")
    dtype = image.dtype if image.dtype.kind == "f" else np.float64
    out = resize(image.astype(np.float64), (out_size, out_size), anti_aliasing=True, preserve_range=True)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1, :]
    if params.angle_deg:
        out = rotate(out, params.angle_deg, order=1, mode="constant", cval=0.0, preserve_range=True)
    if any(params.shift_frac):
        dy, dx = (f * out_size for f in params.shift_frac)
        out = ndimage.shift(out, (dy, dx), order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(dtype)


def augment(image, rng, out_size=AUGMENTED_SIZE):
    """Resize 320->224, random flips, rotation within +-20 deg and shift up to 5%."""
    return apply_augment(image, sample_augment_params(rng), out_size)


def normalize(record, c: NormalizationConstants, tol=1e-9):
    """Map a record to (u_p, u_v, y_l, y_h), each in [0, 1]."""
    checks = {
        "power_w": (record.power_w, c.p_min, c.p_max),
        "velocity_mm_s": (record.velocity_mm_s, c.v_min, c.v_max),
        "length_px": (record.length_px, 0.0, c.l_max),
        "height_px": (record.height_px, 0.0, c.h_max),
    }
    bad = [k for k, (x, lo, hi) in checks.items() if not (lo - tol <= x <= hi + tol)]
    if bad:
        raise ValueError(f"frame {record.frame_id}: values outside normalization range: {', '.join(bad)}")
    return (
        (record.power_w - c.p_min) / (c.p_max - c.p_min),
        (record.velocity_mm_s - c.v_min) / (c.v_max - c.v_min),
        record.length_px / c.l_max,
        record.height_px / c.h_max,
    )


def denormalize(u_p, u_v, y_l, y_h, c: NormalizationConstants):
    return (
        c.p_min + u_p * (c.p_max - c.p_min),
        c.v_min + u_v * (c.v_max - c.v_min),
        y_l * c.l_max,
        y_h * c.h_max,
    )


def write_png(path, image):
    arr = np.round(np.clip(np.asarray(image, dtype=float), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, optimize=False)


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


@dataclass
class GeneratorSettings:
    noise: float = 0.02
    label_noise: float = 0.03
    outlier_fraction: float = 0.02
    outlier_factors: tuple = field(default=(0.6, 1.45))
    jitter: float = 0.0  # relative spread of power/velocity around the grid value


def _frame_geometry(p, v, rng, s: GeneratorSettings):
    length, height = response_surface(p, v)
    length *= 1 + s.label_noise * rng.normal()
    height *= 1 + s.label_noise * rng.normal()
    if rng.random() < s.outlier_fraction:
        k = s.outlier_factors[int(rng.integers(len(s.outlier_factors)))]
        length, height = length * k, height * k
    return min(length, FRAME_SIZE - 12.0), min(height, FRAME_SIZE - 12.0)


def generate_dataset(grid=DoeGrid(), frames_per_cell=40, out_dir="data", seed=0, settings=None):
    """Write images, ``manifest.csv`` and ``norm.json`` under ``out_dir``.

    Returns the manifest path. Output is a pure function of the arguments.
    """
    settings = settings or GeneratorSettings()
    if frames_per_cell < 1:
        raise ValueError("frames_per_cell must be >= 1")
    out = Path(out_dir)
    try:
        for m in Modality:
            (out / "images" / m.value).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directories under {out}: {exc}") from exc

    records = []
    for ci, (p, v) in enumerate(grid.cells()):
        for k in range(frames_per_cell):
            frame_id = f"c{ci:02d}_f{k:04d}"
            rng = frame_rng(seed, frame_id)
            p_f = p * (1 + settings.jitter * rng.uniform(-1, 1))
            v_f = v * (1 + settings.jitter * rng.uniform(-1, 1))
            length, height = _frame_geometry(p_f, v_f, rng, settings)
            paths = {}
            for m in Modality:
                rel = f"images/{m.value}/{frame_id}.png"
                img = render_frame(p_f, v_f, m, seed, settings.noise, (length, height), frame_id)
                try:
                    write_png(out / rel, img)
                except OSError as exc:
                    raise OSError(f"failed writing {out / rel}: {exc}") from exc
                paths[m] = rel
            records.append(
                FrameRecord(
                    frame_id,
                    paths[Modality.ON_AXIS],
                    paths[Modality.OFF_AXIS],
                    round(p_f, 6),
                    round(v_f, 6),
                    round(length, 4),
                    round(height, 4),
                )
            )
    manifest = out / "manifest.csv"
    write_manifest(manifest, records)
    NormalizationConstants.from_records(records).save(out / "norm.json")
    return manifest


def write_manifest(path, records, relative_to=None):
    """Write records; ``relative_to`` rebases paths that were relative to another directory."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            on, off = r.on_axis_path, r.off_axis_path
            if relative_to is not None:
                on = os.path.relpath(Path(relative_to) / on, path.parent)
                off = os.path.relpath(Path(relative_to) / off, path.parent)
            w.writerow([r.frame_id, on, off, f"{r.power_w:.6f}", f"{r.velocity_mm_s:.6f}", f"{r.length_px:.4f}", f"{r.height_px:.4f}"])


def read_manifest(path):
    """Return ``(records, root_dir)``. Image paths stay relative to ``root_dir``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        records = []
        for row in reader:
            rec = FrameRecord(
                row["frame_id"],
                row["on_axis_path"],
                row["off_axis_path"],
                float(row["power_w"]),
                float(row["velocity_mm_s"]),
                float(row["length_px"]),
                float(row["height_px"]),
            )
            if not (rec.length_px > 0 and rec.height_px > 0):
                raise ValueError(f"{path}: frame {rec.frame_id} has nonpositive geometry")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: manifest is empty")
    return records, path.parent


def load_norm(manifest_path):
    return NormalizationConstants.load(Path(manifest_path).parent / "norm.json")


def validate_manifest(path, grid=None, jitter=0.0):
    """Check every record's invariants, including that both images decode."""
    records, root = read_manifest(path)
    problems = []
    for r in records:
        for m in Modality:
            f = root / r.path(m)
            try:
                img = read_png(f)
            except (OSError, ValueError) as exc:
                problems.append(f"{r.frame_id}: cannot decode {f}: {exc}")
                continue
            if img.ndim != 2:
                problems.append(f"{r.frame_id}: {f} is not grayscale")
        if grid is not None:
            lo, hi = 1 - jitter - 1e-9, 1 + jitter + 1e-9
            if not (grid.powers[0] * lo <= r.power_w <= grid.powers[-1] * hi):
                problems.append(f"{r.frame_id}: power {r.power_w} outside grid")
            if not (grid.velocities[0] * lo <= r.velocity_mm_s <= grid.velocities[-1] * hi):
                problems.append(f"{r.frame_id}: velocity {r.velocity_mm_s} outside grid")
    if problems:
        raise ValueError("; ".join(problems[:10]))
    return records
