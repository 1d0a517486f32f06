"""Procedural ultrasound-like volumes with known interface contours, and
the crop/normalize input pipeline.

Each subject volume holds speckle-textured slices in which two tissue
regions with distinct second-order statistics meet along a smooth spline
curve; that curve is the labelled contour. Distractor edges with similar
local gradient statistics are rendered away from the interface and left
unlabelled, low-contrast dropout bands may cross the interface, and an
optional bulge deformation mimics invasive cases. Volumes are a pure
function of (config, subject index), so generation is reproducible and
embarrassingly parallel across subjects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter
from skimage.draw import line as draw_line

from .evaluation import thin


class DataError(RuntimeError):
    """Raised on malformed or missing dataset files."""


MANIFEST_NAME = "manifest.json"

# Display intensities and speckle mixing of the two tissue regions; the
# mean step across the interface is what the label marks.
REGION_A = {"mean": 172.0, "speckle": 0.42, "grain_factor": 0.9}
REGION_B = {"mean": 76.0, "speckle": 0.52, "grain_factor": 1.9}
SPECKLE_LOOKS = 2
DROPOUT_LEVEL = 72.0
DISTRACTOR_MARGIN_PX = 14
DISTRACTOR_HALF_WIDTH = 7


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the volume generator; one config describes a full dataset."""

    seed: int = 7
    num_subjects: int = 49
    slices_min: int = 28
    slices_max: int = 136
    height: int = 352
    width: int = 512
    grain_scale: float = 1.6
    curve_points: int = 6
    curve_amplitude: float = 0.14
    slice_step: float = 2.0
    distractors_min: int = 1
    distractors_max: int = 3
    dropout_prob: float = 0.35
    bulge_prob: float = 31 / 49

    def validate(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.num_subjects < 1:
            raise ValueError("num_subjects must be positive")
        if not (1 <= self.slices_min <= self.slices_max):
            raise ValueError("slice count range is empty")
        if self.height < 352 or self.width < 512:
            raise ValueError("image size must be at least 352 x 512 so a 320 x 480 crop exists")
        if not (3 <= self.curve_points <= 12):
            raise ValueError("curve_points must lie in 3..12")
        if not (0 <= self.distractors_min <= self.distractors_max):
            raise ValueError("distractor count range is empty")
        if not (0.0 <= self.dropout_prob <= 1.0 and 0.0 <= self.bulge_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.grain_scale <= 0 or self.slice_step < 0 or self.curve_amplitude < 0:
            raise ValueError("scales must be positive")


@dataclass
class ImageSample:
    """One grayscale slice with its thin binary contour mask."""

    image: np.ndarray
    mask: np.ndarray
    subject_id: str
    slice_index: int
    meta: dict | None = None


@dataclass
class Volume:
    subject_id: str
    slices: list


def _bulge_subjects(cfg: GenConfig) -> set:
    """Seeded choice of which subjects carry an invasion bulge; the count
    is exact (round of probability times subjects), membership shuffled."""
    n_bulge = int(round(cfg.bulge_prob * cfg.num_subjects))
    perm = np.random.default_rng([cfg.seed, 0xB1]).permutation(cfg.num_subjects)
    return set(int(i) for i in perm[:n_bulge])


def _speckle_envelope(rng, shape, grain: float) -> np.ndarray:
    """Multi-look envelope of PSF-filtered complex backscatter, mean 1."""
    acc = np.zeros(shape)
    for _ in range(SPECKLE_LOOKS):
        re = gaussian_filter(rng.standard_normal(shape), grain)
        im = gaussian_filter(rng.standard_normal(shape), grain)
        acc += np.hypot(re, im)
    env = acc / SPECKLE_LOOKS
    return env / env.mean()


def _smooth_wiggle(rng, width: int, n_points: int, amplitude: float) -> np.ndarray:
    xs = np.linspace(0, width - 1, n_points)
    ys = rng.uniform(-amplitude, amplitude, n_points)
    return CubicSpline(xs, ys)(np.arange(width))


def _rasterize_curve(curve_y: np.ndarray, shape) -> np.ndarray:
    """8-connected one-pixel trace of y(x); thinning enforces the mask
    invariant at corners."""
    mask = np.zeros(shape, dtype=np.uint8)
    rows = np.clip(np.rint(curve_y).astype(int), 0, shape[0] - 1)
    cols = np.arange(shape[1])
    for x in range(len(cols) - 1):
        rr, cc = draw_line(rows[x], x, rows[x + 1], x + 1)
        mask[rr, cc] = 1
    mask[rows[-1], cols[-1]] = 1
    return thin(mask)


def generate_volume(cfg: GenConfig, subject_index: int) -> Volume:
    """Build one subject volume, deterministic in (config, subject index)."""
    cfg.validate()
    if not (0 <= subject_index < cfg.num_subjects):
        raise ValueError(f"subject_index {subject_index} outside 0..{cfg.num_subjects - 1}")
    rng = np.random.default_rng([cfg.seed, 0x51, subject_index])
    h, w = cfg.height, cfg.width
    n_slices = int(rng.integers(cfg.slices_min, cfg.slices_max + 1))

    ctrl_x = np.linspace(0, w - 1, cfg.curve_points)
    base_y = rng.uniform(0.34, 0.66) * h
    ctrl_y = base_y + rng.uniform(-cfg.curve_amplitude, cfg.curve_amplitude, cfg.curve_points) * h

    has_bulge = subject_index in _bulge_subjects(cfg)
    if has_bulge:
        bulge_center = rng.uniform(0.25, 0.75) * w
        bulge_sigma = rng.uniform(0.07, 0.14) * w
        bulge_amp = rng.uniform(0.07, 0.14) * h * rng.choice((-1.0, 1.0))
        bulge_phase = rng.uniform(0.2, 0.8)

    grain_a = cfg.grain_scale * REGION_A["grain_factor"]
    grain_b = cfg.grain_scale * REGION_B["grain_factor"]
    contrast = REGION_A["mean"] - REGION_B["mean"]
    cols = np.arange(w)
    row_grid = np.arange(h)[:, None]

    slices = []
    for s in range(n_slices):
        ctrl_y = np.clip(ctrl_y + rng.normal(0.0, cfg.slice_step, cfg.curve_points),
                         0.18 * h, 0.82 * h)
        curve = CubicSpline(ctrl_x, ctrl_y)(cols)
        if has_bulge:
            profile = np.exp(-((s / max(1, n_slices - 1)) - bulge_phase) ** 2 / 0.08)
            curve = curve + bulge_amp * profile * np.exp(
                -((cols - bulge_center) ** 2) / (2 * bulge_sigma ** 2))
        curve = np.clip(curve, 3.0, h - 4.0)

        env_a = _speckle_envelope(rng, (h, w), grain_a)
        env_b = _speckle_envelope(rng, (h, w), grain_b)
        tex_a = REGION_A["mean"] * (1 - REGION_A["speckle"] + REGION_A["speckle"] * env_a)
        tex_b = REGION_B["mean"] * (1 - REGION_B["speckle"] + REGION_B["speckle"] * env_b)
        img = np.where(row_grid < curve[None, :], tex_a, tex_b)

        distractor_pixels = []
        n_distractors = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
        attempts = 0
        while len(distractor_pixels) < n_distractors and attempts < 4 * max(1, n_distractors):
            attempts += 1
            side = rng.choice((-1.0, 1.0))
            offset = rng.uniform(0.12, 0.30) * h
            wiggle = _smooth_wiggle(rng, w, 5, 0.025 * h)
            yd = curve + side * offset + wiggle
            x0 = int(rng.uniform(0.0, 0.45) * w)
            x1 = min(w - 1, x0 + int(rng.uniform(0.30, 0.65) * w))
            span = np.arange(x0, x1 + 1)
            ok = (np.abs(yd[span] - curve[span]) >= DISTRACTOR_MARGIN_PX) \
                & (yd[span] > 3 + DISTRACTOR_HALF_WIDTH) \
                & (yd[span] < h - 4 - DISTRACTOR_HALF_WIDTH)
            runs = np.split(span[ok], np.where(np.diff(span[ok]) != 1)[0] + 1) if ok.any() else []
            runs = [r for r in runs if len(r) >= 0.12 * w]
            if not runs:
                continue
            run = max(runs, key=len)
            amp = contrast * rng.uniform(0.8, 1.25) * rng.choice((-1.0, 1.0))
            yr = np.rint(yd[run]).astype(int)
            for dy in range(-DISTRACTOR_HALF_WIDTH, DISTRACTOR_HALF_WIDTH + 1):
                prof = np.tanh(dy / 1.0) * np.exp(-abs(dy) / 4.5)
                img[yr + dy, run] += amp * prof
            distractor_pixels.append(np.stack([yr, run], axis=1))

        dropout_spans = []
        if rng.random() < cfg.dropout_prob:
            xc = rng.uniform(0.15, 0.85) * w
            sigma = rng.uniform(0.03, 0.07) * w
            alpha = rng.uniform(0.75, 0.92) * np.exp(-((cols - xc) ** 2) / (2 * sigma ** 2))
            img = img * (1 - alpha[None, :]) + alpha[None, :] * DROPOUT_LEVEL
            half = 1.6 * sigma
            dropout_spans.append((max(0, int(xc - half)), min(w - 1, int(np.ceil(xc + half)))))

        mask = _rasterize_curve(curve, (h, w))
        image = np.clip(img, 0.0, 255.0).astype(np.uint8)
        slices.append(ImageSample(
            image=image, mask=mask,
            subject_id=f"subj{subject_index:03d}", slice_index=s,
            meta={"dropout_spans": dropout_spans,
                  "distractor_pixels": distractor_pixels,
                  "interface_y": curve,
                  "has_bulge": has_bulge},
        ))
    return Volume(subject_id=f"subj{subject_index:03d}", slices=slices)


def generate_dataset(cfg: GenConfig) -> list:
    return [generate_volume(cfg, i) for i in range(cfg.num_subjects)]


# ---------------------------------------------------------------------------
# Input pipeline


def random_crop(sample: ImageSample, h: int, w: int, rng) -> ImageSample:
    """Crop image and mask with one offset drawn uniformly over all valid
    positions."""
    ih, iw = sample.image.shape
    if ih < h or iw < w:
        raise ValueError(f"image {ih}x{iw} smaller than crop {h}x{w}")
    top = int(rng.integers(0, ih - h + 1))
    left = int(rng.integers(0, iw - w + 1))
    return ImageSample(
        image=sample.image[top:top + h, left:left + w],
        mask=sample.mask[top:top + h, left:left + w],
        subject_id=sample.subject_id, slice_index=sample.slice_index,
    )


def center_crop(sample: ImageSample, h: int, w: int) -> ImageSample:
    """Deterministic central window; odd margins split toward the top-left."""
    ih, iw = sample.image.shape
    if ih < h or iw < w:
        raise ValueError(f"image {ih}x{iw} smaller than crop {h}x{w}")
    top, left = (ih - h) // 2, (iw - w) // 2
    return ImageSample(
        image=sample.image[top:top + h, left:left + w],
        mask=sample.mask[top:top + h, left:left + w],
        subject_id=sample.subject_id, slice_index=sample.slice_index,
    )


def normalize(image) -> np.ndarray:
    """Per-image standardization to zero mean and unit variance; the
    standard deviation is floored at 1e-6, so constant images map to 0."""
    arr = np.asarray(image, dtype=np.float64)
    out = (arr - arr.mean()) / max(float(arr.std()), 1e-6)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset directory IO (JSON manifest + 8-bit grayscale PNGs, masks 0/255)


def write_dataset(volumes, out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for vol in volumes:
        subj_dir = out / vol.subject_id
        subj_dir.mkdir(exist_ok=True)
        slices = []
        for sample in vol.slices:
            img_rel = f"{vol.subject_id}/slice_{sample.slice_index:04d}.png"
            mask_rel = f"{vol.subject_id}/slice_{sample.slice_index:04d}_mask.png"
            Image.fromarray(sample.image, mode="L").save(out / img_rel)
            Image.fromarray((sample.mask * 255).astype(np.uint8), mode="L").save(out / mask_rel)
            slices.append({"image": img_rel, "mask": mask_rel, "index": sample.slice_index})
        entries.append({"subject_id": vol.subject_id, "slices": slices})
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump({"volumes": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(path) -> list:
    """Read a dataset directory (or its manifest file) back into volumes."""
    p = Path(path)
    manifest = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    try:
        with open(manifest, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest} is not valid JSON: {exc}") from exc
    root = manifest.parent
    volumes = []
    for entry in doc.get("volumes", []):
        slices = []
        for rec in entry["slices"]:
            img_path, mask_path = root / rec["image"], root / rec["mask"]
            for q in (img_path, mask_path):
                if not q.is_file():
                    raise DataError(f"file referenced by manifest is missing: {q}")
            image = np.asarray(Image.open(img_path).convert("L"), dtype=np.uint8)
            mask = (np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.uint8)
            slices.append(ImageSample(image=image, mask=mask,
                                      subject_id=entry["subject_id"],
                                      slice_index=int(rec["index"])))
        volumes.append(Volume(subject_id=entry["subject_id"], slices=slices))
    if not volumes:
        raise DataError(f"manifest {manifest} lists no volumes")
    return volumes
