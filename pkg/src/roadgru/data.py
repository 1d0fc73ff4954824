"""Scene loading, network inputs, boundary targets, augmentation, synthetic roads."""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

INPUT_HEIGHT = 150
INPUT_WIDTH = 600
NUM_BINS = 60
BIN_WIDTH = INPUT_WIDTH // NUM_BINS
MAX_BOUND = 0.5

NOISE_SIGMA = 0.0002
SCALES = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
WINDOW_STEP = (60, 20)  # (horizontal, vertical) pixels

IMAGE_SUFFIXES = (".png", ".ppm")
GT_SUFFIXES = (".png", ".pgm")


class DataError(ValueError):
    """Unreadable, missing or inconsistent scene data."""


@dataclass
class RawScene:
    image: np.ndarray  # H x W x 3 uint8
    gt_mask: np.ndarray  # H x W bool, True = road
    scene_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"image must be HxWx3, got {self.image.shape}")
        if self.gt_mask.shape != self.image.shape[:2]:
            raise DataError(f"image {self.image.shape[:2]} and ground truth "
                            f"{self.gt_mask.shape} differ in size")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class BoundaryTargets:
    left: float
    right: float
    top: np.ndarray  # (60,)


@dataclass
class Sample:
    input: np.ndarray  # 150 x 600 x 5 float32
    target: BoundaryTargets
    source_mask: np.ndarray  # 150 x 600 bool
    scene_id: str = ""


# ---------------------------------------------------------------------------
# file I/O


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def decode_gt(gt: np.ndarray) -> np.ndarray:
    """Road mask from a ground-truth raster.

    Colour rasters follow the KITTI road convention (road iff blue == 255);
    single-channel rasters mark road with 255.
    """
    if gt.ndim == 3:
        return gt[..., 2] == 255
    return gt == 255


def encode_gt(mask: np.ndarray) -> np.ndarray:
    """KITTI colour ground truth: road (255,0,255), everything else (255,0,0)."""
    out = np.zeros(mask.shape + (3,), np.uint8)
    out[..., 0] = 255
    out[..., 2] = np.where(mask, 255, 0)
    return out


def load_scene(image_path, gt_path, scene_id: str | None = None) -> RawScene:
    image_path, gt_path = Path(image_path), Path(gt_path)
    image = read_image(image_path)
    try:
        with Image.open(gt_path) as im:
            gt = np.asarray(im if im.mode == "L" else im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read ground truth {gt_path}: {exc}") from exc
    mask = decode_gt(gt)
    if mask.shape != image.shape[:2]:
        raise DataError(f"{image_path.name} is {image.shape[1]}x{image.shape[0]} but "
                        f"{gt_path.name} is {mask.shape[1]}x{mask.shape[0]}")
    return RawScene(image, mask, scene_id or image_path.stem)


def gt_name_for(image_name: str) -> str:
    """``um_000012.png`` -> ``um_road_000012`` (suffix-less)."""
    stem = Path(image_name).stem
    m = re.match(r"^(.*)_(\d+)$", stem)
    if not m:
        raise DataError(f"image name {image_name!r} does not follow <category>_<index>")
    return f"{m.group(1)}_road_{m.group(2)}"


def list_dataset(data_dir, require_gt: bool = True) -> list[tuple[Path, Path | None]]:
    """Pairs of (image, ground truth) in a KITTI road layout directory."""
    data_dir = Path(data_dir)
    img_dir, gt_dir = data_dir / "image_2", data_dir / "gt_image_2"
    if not img_dir.is_dir():
        raise DataError(f"{data_dir} has no image_2/ directory")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise DataError(f"no images in {img_dir}")
    pairs = []
    for img in images:
        gt = None
        if gt_dir.is_dir():
            stem = gt_name_for(img.name)
            for suffix in GT_SUFFIXES:
                if (gt_dir / (stem + suffix)).exists():
                    gt = gt_dir / (stem + suffix)
                    break
        if gt is None and require_gt:
            raise DataError(f"no ground truth for {img.name} in {gt_dir}")
        pairs.append((img, gt))
    return pairs


def load_dataset(data_dir) -> list[RawScene]:
    return [load_scene(img, gt) for img, gt in list_dataset(data_dir)]


def write_scene(scene: RawScene, data_dir, index: int, fmt: str = "png",
                prefix: str = "syn") -> tuple[Path, Path]:
    """Write a scene in the KITTI layout; ``fmt`` is ``png`` or ``ppm``."""
    data_dir = Path(data_dir)
    (data_dir / "image_2").mkdir(parents=True, exist_ok=True)
    (data_dir / "gt_image_2").mkdir(parents=True, exist_ok=True)
    img_path = data_dir / "image_2" / f"{prefix}_{index:06d}.{'png' if fmt == 'png' else 'ppm'}"
    stem = gt_name_for(img_path.name)
    if fmt == "png":
        gt_path = data_dir / "gt_image_2" / f"{stem}.png"
        Image.fromarray(encode_gt(scene.gt_mask)).save(gt_path)
    elif fmt == "ppm":
        gt_path = data_dir / "gt_image_2" / f"{stem}.pgm"
        Image.fromarray(np.where(scene.gt_mask, 255, 0).astype(np.uint8)).save(gt_path)
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    Image.fromarray(scene.image).save(img_path)
    return img_path, gt_path


# ---------------------------------------------------------------------------
# resizing


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BILINEAR))


def resize_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resample of the 0/1 mask, thresholded at 0.5."""
    if mask.shape == (height, width):
        return mask.copy()
    img = Image.fromarray(mask.astype(np.float32))
    return np.asarray(img.resize((width, height), Image.BILINEAR)) >= 0.5


def resize_mask_nearest(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    if mask.shape == (height, width):
        return mask.copy()
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(img.resize((width, height), Image.NEAREST)) >= 128


# ---------------------------------------------------------------------------
# network inputs and targets


@functools.lru_cache(maxsize=1)
def coordinate_channels() -> np.ndarray:
    """150x600x2 planes of normalized row and column position (read-only)."""
    rows = np.arange(INPUT_HEIGHT, dtype=np.float32) / INPUT_HEIGHT
    cols = np.arange(INPUT_WIDTH, dtype=np.float32) / INPUT_WIDTH
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    coords.setflags(write=False)
    return coords


def assemble_input(rgb01: np.ndarray) -> np.ndarray:
    """Append coordinate planes to a 150x600x3 array already scaled to [0, 1]."""
    if rgb01.shape != (INPUT_HEIGHT, INPUT_WIDTH, 3):
        raise DataError(f"expected {INPUT_HEIGHT}x{INPUT_WIDTH}x3 colour, got {rgb01.shape}")
    return np.concatenate([rgb01.astype(np.float32), coordinate_channels()], axis=-1)


def make_input(image: np.ndarray) -> np.ndarray:
    """Any HxWx3 uint8 image -> 150x600x5 float32 network input."""
    if image.size == 0:
        raise DataError("empty image")
    small = resize_image(image, INPUT_WIDTH, INPUT_HEIGHT)
    return assemble_input(small.astype(np.float32) / 255.0)


def derive_targets(mask: np.ndarray) -> BoundaryTargets:
    """Left/right extents and per-bin road height of a 150x600 mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (INPUT_HEIGHT, INPUT_WIDTH):
        raise DataError(f"target mask must be {INPUT_HEIGHT}x{INPUT_WIDTH}, got {mask.shape}")
    cols = np.flatnonzero(mask.any(axis=0))
    top = np.zeros(NUM_BINS)
    if cols.size == 0:
        return BoundaryTargets(MAX_BOUND, MAX_BOUND, top)
    left = min(cols[0] / INPUT_WIDTH, MAX_BOUND)
    right = min((INPUT_WIDTH - 1 - cols[-1]) / INPUT_WIDTH, MAX_BOUND)
    binned = mask.reshape(INPUT_HEIGHT, NUM_BINS, BIN_WIDTH).any(axis=2)  # rows x bins
    has_road = binned.any(axis=0)
    first_row = np.argmax(binned, axis=0)
    top[has_road] = np.minimum((INPUT_HEIGHT - first_row[has_road]) / INPUT_HEIGHT, MAX_BOUND)
    return BoundaryTargets(float(left), float(right), top)


def full_frame_sample(scene: RawScene, noise_sigma: float = 0.0, rng_seed=None) -> Sample:
    """The whole frame squeezed to 600x150, as seen by the near-range pass."""
    x = make_input(scene.image)
    if noise_sigma:
        x = _add_noise(x, noise_sigma, np.random.default_rng(rng_seed))
    mask = resize_mask(scene.gt_mask, INPUT_WIDTH, INPUT_HEIGHT)
    return Sample(x, derive_targets(mask), mask, scene.scene_id)


def _add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = x.copy()
    noise = rng.normal(0.0, sigma, size=x.shape[:2] + (3,)).astype(np.float32)
    x[..., :3] = np.clip(x[..., :3] + noise, 0.0, 1.0)
    return x


def scaled_size(shape: tuple[int, int], scale: float) -> tuple[int, int]:
    h, w = shape
    return int(round(h * scale)), int(round(w * scale))


def window_grid(height: int, width: int, step=WINDOW_STEP) -> list[tuple[int, int]]:
    """Top-left (dx, dy) of every 600x150 window on the shift grid."""
    if height < INPUT_HEIGHT or width < INPUT_WIDTH:
        return []
    xs = range(0, width - INPUT_WIDTH + 1, step[0])
    ys = range(0, height - INPUT_HEIGHT + 1, step[1])
    return [(dx, dy) for dy in ys for dx in xs]


def augment_views(shape: tuple[int, int], scales: Sequence[float] = SCALES,
                  step=WINDOW_STEP) -> list[tuple[float, int, int]]:
    """All (scale, dx, dy) combinations valid for a frame of ``shape``."""
    views = []
    for s in scales:
        h, w = scaled_size(shape, s)
        views.extend((s, dx, dy) for dx, dy in window_grid(h, w, step))
    return views


def augment(scene: RawScene, scale: float, offset: tuple[int, int],
            noise_sigma: float = NOISE_SIGMA, rng_seed=None) -> Sample:
    """Scale the scene, cut a 600x150 window at ``offset=(dx, dy)``, add noise."""
    if not 0.5 <= scale <= 1.0:
        raise ValueError(f"scale must lie in [0.5, 1.0], got {scale}")
    h, w = scaled_size(scene.shape, scale)
    dx, dy = offset
    if dx < 0 or dy < 0 or dx + INPUT_WIDTH > w or dy + INPUT_HEIGHT > h:
        raise ValueError(f"window {INPUT_WIDTH}x{INPUT_HEIGHT} at ({dx}, {dy}) does not fit "
                         f"inside the {w}x{h} image scaled by {scale}")
    image = resize_image(scene.image, w, h)
    mask = resize_mask(scene.gt_mask, w, h)
    crop = image[dy:dy + INPUT_HEIGHT, dx:dx + INPUT_WIDTH]
    crop_mask = mask[dy:dy + INPUT_HEIGHT, dx:dx + INPUT_WIDTH]
    x = assemble_input(crop.astype(np.float32) / 255.0)
    if noise_sigma:
        x = _add_noise(x, noise_sigma, np.random.default_rng(rng_seed))
    return Sample(x, derive_targets(crop_mask), crop_mask.copy(), scene.scene_id)


# ---------------------------------------------------------------------------
# training sets


@dataclass
class SampleDataset:
    """A fixed list of samples; every epoch visits all of them."""

    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    def scene_ids(self) -> list[str]:
        return sorted({s.scene_id for s in self.samples})

    def subset(self, scene_ids) -> "SampleDataset":
        keep = set(scene_ids)
        return SampleDataset([s for s in self.samples if s.scene_id in keep])

    def epoch_samples(self, epoch: int) -> list[Sample]:
        return self.samples


@dataclass
class SceneDataset:
    """Raw scenes turned into samples on demand.

    ``views="grid"`` expands every scene into its full-frame view plus every
    scale/window combination once.  ``views="random"`` draws, for each epoch
    and scene, either the full-frame view or one random grid view; the draw is
    a pure function of ``(seed, epoch, scene index)``.
    """

    scenes: list[RawScene]
    views: str = "grid"
    seed: int = 0
    noise_sigma: float = NOISE_SIGMA
    full_frame_prob: float = 0.5
    _grid_cache: list[Sample] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.views not in ("grid", "random"):
            raise ValueError(f"views must be 'grid' or 'random', got {self.views!r}")

    def __len__(self) -> int:
        return len(self.scenes)

    def scene_ids(self) -> list[str]:
        return sorted({s.scene_id for s in self.scenes})

    def subset(self, scene_ids) -> "SceneDataset":
        keep = set(scene_ids)
        return SceneDataset([s for s in self.scenes if s.scene_id in keep], self.views,
                            self.seed, self.noise_sigma, self.full_frame_prob)

    def fixed_samples(self) -> list[Sample]:
        """Deterministic noise-free full-frame views, one per scene."""
        return [full_frame_sample(s) for s in self.scenes]

    def _iter_grid(self) -> Iterator[Sample]:
        for i, scene in enumerate(self.scenes):
            yield full_frame_sample(scene, self.noise_sigma, (self.seed, i, 0))
            for j, (s, dx, dy) in enumerate(augment_views(scene.shape), 1):
                yield augment(scene, s, (dx, dy), self.noise_sigma, (self.seed, i, j))

    def random_view(self, index: int, epoch: int) -> Sample:
        scene = self.scenes[index]
        rng = np.random.default_rng((self.seed, epoch, index))
        noise_seed = (self.seed, epoch, index, 1)
        views = augment_views(scene.shape)
        if not views or rng.random() < self.full_frame_prob:
            return full_frame_sample(scene, self.noise_sigma, noise_seed)
        s, dx, dy = views[rng.integers(len(views))]
        return augment(scene, s, (dx, dy), self.noise_sigma, noise_seed)

    def epoch_samples(self, epoch: int) -> list[Sample]:
        if self.views == "grid":
            if self._grid_cache is None:
                self._grid_cache = list(self._iter_grid())
            return self._grid_cache
        return [self.random_view(i, epoch) for i in range(len(self.scenes))]


def stack_samples(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays: inputs (N,150,600,5), left (N,), right (N,), top (N,60)."""
    x = np.stack([s.input for s in samples])
    left = np.array([s.target.left for s in samples])
    right = np.array([s.target.right for s in samples])
    top = np.stack([s.target.top for s in samples])
    return x, left, right, top


# ---------------------------------------------------------------------------
# synthetic scenes


def _road_mask(height: int, width: int, vp: tuple[float, float], bottom: tuple[float, float],
               top_row: int) -> np.ndarray:
    """Region between the lines vp->bottom-left and vp->bottom-right, below ``top_row``."""
    vx, vy = vp
    bl, br = bottom
    rows = np.arange(height, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(width, dtype=np.float64)[None, :] + 0.5
    t = (rows - vy) / (height - vy)
    left = vx + t * (bl - vx)
    right = vx + t * (br - vx)
    return (rows >= top_row) & (cols >= left) & (cols <= right)


def synth_scene(rng_seed, width: int = 1242, height: int = 375,
                thin_far: bool = False, occluders: bool = True) -> RawScene:
    """Render a textured road trapezoid converging towards a vanishing point.

    The ground-truth mask is exactly the drawn trapezoid; occluding rectangles
    are only painted over non-road pixels.  ``thin_far`` places the top of the
    road just below the vanishing point so the far end narrows to a sliver.
    """
    rng = np.random.default_rng(rng_seed)
    for _ in range(1000):
        vx = rng.uniform(0.35, 0.65) * width
        if thin_far:
            top_row = int(rng.uniform(0.50, 0.56) * height)
            vy = top_row - rng.uniform(2.0, 10.0)
            half = rng.uniform(0.25, 0.6) * width
        else:
            vy = rng.uniform(0.30, 0.50) * height
            top_row = int(max(rng.uniform(0.51, 0.68) * height, vy + 2))
            half = rng.uniform(0.15, 0.6) * width
        bx = vx + rng.uniform(-0.2, 0.2) * width
        mask = _road_mask(height, width, (vx, vy), (bx - half, bx + half), top_row)
        frac = mask.mean()
        if 0.05 <= frac <= 0.6:
            break
    else:  # pragma: no cover - the ranges above make this unreachable in practice
        raise RuntimeError("could not sample a road with a valid area fraction")

    horizon = int(np.clip(vy, 1, height - 1))
    img = np.empty((height, width, 3), np.float64)
    sky_top = rng.uniform([90, 130, 170], [150, 190, 240])
    sky_bot = rng.uniform([170, 190, 200], [230, 235, 250])
    ramp = np.linspace(0, 1, horizon)[:, None, None]
    img[:horizon] = sky_top + ramp * (sky_bot - sky_top)
    ground = rng.uniform([40, 70, 20], [140, 150, 80])  # grass / soil
    img[horizon:] = ground
    # coarse texture patches on the ground
    for _ in range(rng.integers(3, 9)):
        y0 = rng.integers(horizon, height)
        x0 = rng.integers(0, width)
        h = rng.integers(10, 80)
        w = rng.integers(30, 300)
        img[y0:y0 + h, x0:x0 + w] = ground + rng.uniform(-30, 30, 3)

    gray = rng.uniform(60, 150)
    tint = rng.uniform(-8, 8, 3)
    img[mask] = gray + tint
    # lane marking along the road axis
    if rng.random() < 0.6:
        rows = np.arange(height)[:, None] + 0.5
        t = (rows - vy) / (height - vy)
        centre = vx + t * (bx - vx)
        lane_w = 1.5 + 6.0 * np.clip(t, 0, 1)
        cols = np.arange(width)[None, :] + 0.5
        dashes = ((rows // 15) % 2 == 0)
        marking = mask & (np.abs(cols - centre) < lane_w) & dashes
        img[marking] = rng.uniform(200, 250)

    if occluders:
        for _ in range(rng.integers(0, 5)):
            h = rng.integers(20, int(0.4 * height))
            w = rng.integers(20, int(0.2 * width))
            y0 = rng.integers(max(0, horizon - h), max(1, horizon + 20))
            x0 = rng.integers(0, width - w)
            block = np.zeros_like(mask)
            block[y0:y0 + h, x0:x0 + w] = True
            img[block & ~mask] = rng.uniform(20, 220, 3)

    img += rng.normal(0, 6.0, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return RawScene(image, mask, f"synth_{rng_seed}")
