"""Paired image/mask ingestion, augmentation, and the synthetic toy dataset.

Directory layout is ``<root>/images/<id>.<ext>`` and ``<root>/masks/<id>.<ext>``
with 8-bit PNG or JPEG files. Images are loaded channel-major as float32 in
[-1, 1] (bilinear resize, v -> v/127.5 - 1); masks are collapsed to a single
channel, nearest-neighbor resized, and thresholded at 0.5 so they stay
strictly binary. Empty masks load fine but are flagged in the load report.

The toy generator writes the same layout: each pair is a random filled
ellipse mask plus an image whose background is a dark smooth texture in
[-1, -0.2] and whose ellipse interior is brightened into [0.3, 1.0], which
gives later stages an unambiguous conditioning signal to learn and measure.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, rotate

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# toy ellipse axis lengths as a fraction of the image side (semi-axes are half)
TOY_AXIS_RANGE = (0.15, 0.40)


@dataclass
class PairedSample:
    """One training pair: image (C, H, W) in [-1, 1], mask (1, H, W) in {0, 1}."""

    image: np.ndarray
    mask: np.ndarray
    id: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list  # (image_path, mask_path, id) triples
    height: int
    width: int

    def __post_init__(self):
        ids = [e[2] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in manifest")
        for img, msk, sid in self.entries:
            if not Path(img).exists():
                raise FileNotFoundError(f"missing image for {sid}: {img}")
            if not Path(msk).exists():
                raise FileNotFoundError(f"missing mask for {sid}: {msk}")

    @classmethod
    def scan(cls, root, target_hw) -> "DatasetManifest":
        """Pair up <root>/images/* with <root>/masks/* by filename stem."""
        root = Path(root)
        img_dir, msk_dir = root / "images", root / "masks"
        if not img_dir.is_dir() or not msk_dir.is_dir():
            raise FileNotFoundError(f"{root} must contain images/ and masks/")
        masks_by_stem = {
            p.stem: p
            for p in sorted(msk_dir.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        }
        entries = []
        for img in sorted(img_dir.iterdir()):
            if img.suffix.lower() not in IMAGE_EXTENSIONS:
                continue
            mask = masks_by_stem.get(img.stem)
            if mask is None:
                raise FileNotFoundError(f"no mask for image {img.name}")
            entries.append((img, mask, img.stem))
        if not entries:
            raise ValueError(f"no image/mask pairs found under {root}")
        h, w = _as_hw(target_hw)
        return cls(root=root, entries=entries, height=h, width=w)


@dataclass
class LoadReport:
    n_loaded: int = 0
    empty_mask_ids: list = field(default_factory=list)


def _as_hw(target_hw) -> tuple[int, int]:
    if isinstance(target_hw, int):
        return target_hw, target_hw
    h, w = target_hw
    return int(h), int(w)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] float (C, H, W) to uint8 (H, W, C): round((v+1) * 127.5)."""
    v = np.clip(image, -1.0, 1.0)
    return np.round((v + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    """Inverse mapping for 8-bit (H, W, C) or (H, W) pixels: v/127.5 - 1."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def save_image_png(path, image: np.ndarray) -> None:
    arr = image_to_uint8(image)
    Image.fromarray(arr.squeeze(-1) if arr.shape[-1] == 1 else arr).save(path)


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((mask[0] * 255).astype(np.uint8), mode="L").save(path)


def load_pair(image_file, mask_file, target_hw) -> PairedSample:
    """Load, resize, and normalize one image/mask pair."""
    h, w = _as_hw(target_hw)
    try:
        with Image.open(image_file) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            im = im.resize((w, h), Image.BILINEAR)
            image = uint8_to_image(np.asarray(im))
    except OSError as exc:
        raise ValueError(f"cannot decode image {image_file}: {exc}") from exc
    try:
        with Image.open(mask_file) as mm:
            mm = mm.convert("L").resize((w, h), Image.NEAREST)
            mask_arr = np.asarray(mm, dtype=np.float32) / 255.0
    except OSError as exc:
        raise ValueError(f"cannot decode mask {mask_file}: {exc}") from exc
    mask = (mask_arr > 0.5).astype(np.float32)[None]
    return PairedSample(image=image, mask=mask, id=Path(image_file).stem)


def load_manifest(manifest: DatasetManifest) -> tuple[list, LoadReport]:
    """Load every manifest entry; empty masks are kept but reported."""
    samples, report = [], LoadReport()
    for img, msk, sid in manifest.entries:
        sample = load_pair(img, msk, (manifest.height, manifest.width))
        sample.id = sid
        if sample.mask.sum() == 0:
            report.empty_mask_ids.append(sid)
        samples.append(sample)
        report.n_loaded += 1
    return samples, report


def _hflip(arr: np.ndarray) -> np.ndarray:
    return arr[:, :, ::-1].copy()


def _rot90(arr: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(arr, k, axes=(1, 2)).copy()


def augment(sample: PairedSample, rng: np.random.Generator) -> PairedSample:
    """Random flip, 90-degree rotation, and small-angle rotation.

    The same geometric transform is applied to image and mask: bilinear
    interpolation with reflect padding for the image, nearest for the mask,
    and the mask is re-thresholded so it stays binary. Exactly four draws
    are consumed per call, independent of which transforms fire.
    """
    do_flip = rng.random() < 0.5
    quarter_turns = int(rng.integers(0, 4))
    do_small = rng.random() < 0.5
    angle = float(rng.uniform(-15.0, 15.0))

    image, mask = sample.image, sample.mask
    if do_flip:
        image, mask = _hflip(image), _hflip(mask)
    if quarter_turns:
        image, mask = _rot90(image, quarter_turns), _rot90(mask, quarter_turns)
    if do_small:
        image = rotate(
            image, angle, axes=(2, 1), reshape=False, order=1, mode="reflect"
        ).astype(np.float32)
        mask = rotate(
            mask, angle, axes=(2, 1), reshape=False, order=0, mode="reflect"
        )
        mask = (mask > 0.5).astype(np.float32)
    return PairedSample(image=image, mask=mask, id=sample.id)


def _smooth_field(rng: np.random.Generator, hw: int) -> np.ndarray:
    """Smooth random texture in [0, 1] with its mean pinned near 0.5.

    The recentering keeps per-image brightness statistics stable across the
    dataset, which keeps the denoising task learnable at desk scale.
    """
    field_ = gaussian_filter(rng.standard_normal((hw, hw)), sigma=hw / 8.0)
    span = field_.max() - field_.min()
    if span < 1e-12:
        return np.full((hw, hw), 0.5)
    u = (field_ - field_.min()) / span
    return np.clip(u - u.mean() + 0.5, 0.0, 1.0)


def _ellipse_mask(rng: np.random.Generator, hw: int) -> tuple[np.ndarray, float, float]:
    """Random filled ellipse kept fully inside the frame; returns semi-axes."""
    a, b = rng.uniform(TOY_AXIS_RANGE[0] * hw, TOY_AXIS_RANGE[1] * hw, size=2) / 2.0
    theta = rng.uniform(0.0, math.pi)
    margin = max(a, b) + 1.0
    cy, cx = rng.uniform(margin, hw - 1 - margin, size=2)
    yy, xx = np.mgrid[0:hw, 0:hw]
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return inside, a, b


def make_toy_dataset(n: int, hw: int, seed: int, out_dir) -> DatasetManifest:
    """Write ``n`` synthetic pairs plus manifest.tsv; deterministic per seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if hw < 16:
        raise ValueError(f"hw must be >= 16, got {hw}")
    out = Path(out_dir)
    img_dir, msk_dir = out / "images", out / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    msk_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(n):
        rng = np.random.default_rng((seed, i))
        inside, _, _ = _ellipse_mask(rng, hw)

        image = np.empty((3, hw, hw), dtype=np.float64)
        for c in range(3):
            bg = -1.0 + 0.8 * _smooth_field(rng, hw)
            fg = 0.3 + 0.7 * _smooth_field(rng, hw)
            chan = np.where(inside, fg, bg)
            chan = chan + rng.normal(0.0, 0.02, size=chan.shape)
            chan = np.where(
                inside, np.clip(chan, 0.3, 1.0), np.clip(chan, -1.0, -0.2)
            )
            image[c] = chan

        sid = f"toy_{i:04d}"
        img_path, msk_path = img_dir / f"{sid}.png", msk_dir / f"{sid}.png"
        save_image_png(img_path, image.astype(np.float32))
        save_mask_png(msk_path, inside[None].astype(np.float32))
        entries.append((img_path, msk_path, sid))

    with open(out / "manifest.tsv", "w") as fh:
        fh.write("id\timage_path\tmask_path\n")
        for img_path, msk_path, sid in entries:
            fh.write(f"{sid}\t{img_path.relative_to(out)}\t{msk_path.relative_to(out)}\n")
    return DatasetManifest(root=out, entries=entries, height=hw, width=hw)
