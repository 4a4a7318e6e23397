"""Image/mask ingestion, dataset manifests and the synthetic lesion generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ContractError, IngestionError
from .tensor.ops import bilinear_matrix

MASK_THRESHOLD = 127
IMAGE_SUFFIXES = (".png",)


@dataclass
class Sample:
    image: np.ndarray   # (3, h, w) float32 in [0, 1]
    mask: np.ndarray    # (1, h, w) uint8 in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ContractError(f"image must be (3, h, w), got {self.image.shape}")
        if self.mask.shape != (1,) + self.image.shape[1:]:
            raise ContractError(f"mask shape {self.mask.shape} does not match image {self.image.shape}")


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = ()           # (image path, mask path, id)
    split: str = "all"
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e[2] for e in self.entries]


# ---------------------------------------------------------------------------
# ingestion


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}") from None


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Source index for each output position under half-pixel-centred nearest neighbour."""
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    return mask[nearest_index(h, out_h)[:, None], nearest_index(w, out_w)[None, :]]


def load_image(path, target: int | None = None) -> np.ndarray:
    img = _open(path).convert("RGB")
    if target is not None and img.size != (target, target):
        img = img.resize((target, target), Image.Resampling.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_mask(path, target: int | None = None) -> np.ndarray:
    gray = np.asarray(_open(path).convert("L"))
    if target is not None:
        gray = resize_mask(gray, target, target)
    return (gray > MASK_THRESHOLD).astype(np.uint8)[None]


def load_sample(image_path, mask_path, target: int = 256) -> Sample:
    return Sample(load_image(image_path, target), load_mask(mask_path, target), Path(image_path).stem)


def save_png(path, array: np.ndarray) -> None:
    """Write an 8-bit (h, w) grayscale or (3, h, w) RGB array."""
    a = np.asarray(array)
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(a, dtype=np.uint8)).save(path, format="PNG")


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_sample(sample: Sample, image_dir, mask_dir) -> tuple[Path, Path]:
    ip = Path(image_dir) / f"{sample.id}.png"
    mp = Path(mask_dir) / f"{sample.id}.png"
    save_png(ip, to_uint8(sample.image))
    save_png(mp, sample.mask[0] * 255)
    return ip, mp


# ---------------------------------------------------------------------------
# manifests


def manifest_from_folders(image_dir, mask_dir) -> DatasetManifest:
    """Pair images and masks by file stem; unmatched images are an error."""
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise IngestionError(f"missing image or mask folder: {image_dir}, {mask_dir}")
    masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    entries = []
    for img in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        if img.stem not in masks:
            raise IngestionError(f"no mask for image {img}")
        entries.append((str(img), str(masks[img.stem]), img.stem))
    return DatasetManifest(tuple(entries))


def manifest_from_dir(root) -> DatasetManifest:
    """``root/images/*.png`` paired with ``root/masks/*.png``."""
    root = Path(root)
    return manifest_from_folders(root / "images", root / "masks")


def read_manifest(path) -> DatasetManifest:
    """Tab-separated (image path, mask path, id) lines; relative paths resolve next to the file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    for row in csv.reader(lines, delimiter="\t"):
        if not row:
            continue
        if len(row) != 3:
            raise IngestionError(f"{path}: expected 3 tab-separated fields, got {row}")
        img, mask, sid = row
        entries.append((str(path.parent / img), str(path.parent / mask), sid))
    return DatasetManifest(tuple(entries))


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text("".join(f"{i}\t{m}\t{s}\n" for i, m, s in manifest.entries))


def split_dataset(manifest: DatasetManifest, n_train: int, n_test: int, seed: int
                  ) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle followed by a prefix split into disjoint train and test manifests."""
    tr, te = split_indices(len(manifest), n_train, n_test, seed)
    train = DatasetManifest(tuple(manifest.entries[i] for i in tr), "train", seed)
    test = DatasetManifest(tuple(manifest.entries[i] for i in te), "test", seed)
    return train, test


def split_indices(total: int, n_train: int, n_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n_train < 0 or n_test < 0 or n_train + n_test > total:
        raise ContractError(f"cannot take {n_train} + {n_test} items from {total}")
    order = np.random.default_rng(seed).permutation(total)
    return order[:n_train], order[n_train:n_train + n_test]


def holdout_count(total: int, fraction: float = 0.15) -> int:
    """Held-out size used when only a total is given (30 of 200)."""
    return int(round(total * fraction))


def load_manifest(manifest: DatasetManifest, target: int) -> list[Sample]:
    out = []
    for img, mask, sid in manifest.entries:
        s = load_sample(img, mask, target)
        s.id = sid
        out.append(s)
    return out


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


# ---------------------------------------------------------------------------
# synthetic lesions


@dataclass(frozen=True)
class SynthParams:
    min_area: float = 0.02
    max_area: float = 0.5
    falloff: float = 2.0
    speckle: float = 0.04
    max_tries: int = 64
    skin: tuple = field(default=(0.87, 0.68, 0.58))


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    m = bilinear_matrix(cells, size)
    return m @ coarse @ m.T


def _ellipses(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        a = rng.uniform(0.08, 0.3) * size
        b = a * rng.uniform(0.5, 1.0)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        mask |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def synth_lesion(seed: int, size: int = 64, params: SynthParams = SynthParams()) -> Sample:
    """Skin-toned background with a darker union of 1-3 soft-edged ellipses.

    The mask is the exact ellipse union; the image blends the lesion in over a
    ``falloff``-pixel band outside it. Everything is drawn from ``seed``.
    """
    if size < 16:
        raise ContractError(f"synthetic samples need size >= 16, got {size}")
    rng = np.random.default_rng(seed)
    for _ in range(params.max_tries):
        mask = _ellipses(rng, size)
        if params.min_area <= mask.mean() <= params.max_area:
            break
    else:
        raise ContractError(f"seed {seed}: no admissible lesion after {params.max_tries} draws")

    skin = np.asarray(params.skin)[:, None, None] + rng.uniform(-0.06, 0.06, size=(3, 1, 1))
    background = skin * (1.0 + 0.05 * _smooth_noise(rng, size))
    lesion = skin * rng.uniform(0.3, 0.55) * (1.0 + 0.08 * _smooth_noise(rng, size, 6))
    outside = ndimage.distance_transform_edt(~mask)
    alpha = np.clip(1.0 - outside / params.falloff, 0.0, 1.0)
    alpha[mask] = 1.0
    image = background * (1 - alpha) + lesion * alpha
    image += params.speckle * alpha * rng.standard_normal((3, size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask[None].astype(np.uint8), f"synth{seed:06d}")


SYNTH_SEED_STRIDE = 100_000


def synth_seed(seed: int, index: int) -> int:
    """Generator seed of item ``index`` in the synthetic set drawn with ``seed``."""
    return seed * SYNTH_SEED_STRIDE + index


def synth_dataset(n: int, size: int, seed: int, start: int = 0) -> list[Sample]:
    return [synth_lesion(synth_seed(seed, i), size) for i in range(start, start + n)]
