"""Synthetic imbalanced lesion-segmentation datasets and class-biased patch sampling.

Each image holds one smooth Gaussian random field; its top quantile becomes
the lesion and is split into nested classes by field value (highest values
get the highest label, like a tumour core inside edema). Channels mix
per-class contrasts, a slowly varying background and white noise, then are
standardized per image and clipped to ``[-CLIP, CLIP]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import container

CLIP = 5.0


class InfeasibleParamsError(ValueError):
    pass


class NoCandidateError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenParams:
    n_images: int = 40
    image_size: int = 64
    in_channels: int = 2
    num_classes: int = 2
    # fraction of pixels per foreground class, drawn uniformly per image
    class_fraction: tuple[float, float] = (0.01, 0.05)
    blob_sigma: float = 3.0
    edge_blur: float = 0.8
    noise: float = 0.45
    background_amplitude: float = 0.5
    background_sigma: float = 12.0
    # contrasts[c][k]: intensity added to channel c inside class k
    contrasts: tuple[tuple[float, ...], ...] = ((0.0, 1.0), (0.0, 0.6))
    split_fractions: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_fraction", tuple(float(v) for v in self.class_fraction))
        object.__setattr__(self, "contrasts", tuple(tuple(float(v) for v in row) for row in self.contrasts))
        object.__setattr__(self, "split_fractions", tuple(float(v) for v in self.split_fractions))

    def validate(self) -> None:
        n_pix = self.image_size ** 2
        lo, hi = self.class_fraction
        if self.num_classes < 2:
            raise InfeasibleParamsError("num_classes must be >= 2")
        if self.n_images < 3 or self.image_size < 4 or self.in_channels < 1:
            raise InfeasibleParamsError("need n_images >= 3, image_size >= 4, in_channels >= 1")
        if not 0 < lo <= hi < 1:
            raise InfeasibleParamsError(f"class_fraction must satisfy 0 < lo <= hi < 1, got {(lo, hi)}")
        if int(np.ceil(lo * n_pix)) > int(np.floor(hi * n_pix)):
            raise InfeasibleParamsError(f"no integer pixel count fits class_fraction {(lo, hi)} "
                                        f"on a {self.image_size}x{self.image_size} image")
        if hi * (self.num_classes - 1) >= 1:
            raise InfeasibleParamsError("foreground classes could cover the whole image")
        if self.blob_sigma <= 0 or 4 * self.blob_sigma > self.image_size:
            raise InfeasibleParamsError(f"blob_sigma {self.blob_sigma} too large for image size {self.image_size}")
        if len(self.contrasts) != self.in_channels or any(len(r) != self.num_classes for r in self.contrasts):
            raise InfeasibleParamsError("contrasts must be an in_channels x num_classes table")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions) \
                or sum(self.split_fractions) > 1 + 1e-9:
            raise InfeasibleParamsError("split_fractions must be three non-negative values summing to <= 1")
        if self.noise < 0 or self.edge_blur < 0 or self.background_sigma <= 0:
            raise InfeasibleParamsError("noise, edge_blur must be >= 0 and background_sigma > 0")


def binary_profile(**overrides) -> GenParams:
    """Two classes, two channels, 1-5% lesion per image."""
    return GenParams(**overrides)


def multiclass_profile(**overrides) -> GenParams:
    """Background plus three nested lesion classes over four channels."""
    params = dict(
        in_channels=4, num_classes=4, class_fraction=(0.01, 0.04), blob_sigma=4.0,
        contrasts=((0.0, 1.0, 0.6, 0.8),
                   (0.0, 0.0, 0.3, 1.2),
                   (0.0, 0.2, -0.6, -0.2),
                   (0.0, 0.8, 0.9, 0.4)))
    params.update(overrides)
    return GenParams(**params)


PROFILES = {"binary": binary_profile, "multiclass": multiclass_profile}


@dataclass
class SynthDataset:
    images: np.ndarray  # [n, C, H, W] float64
    masks: np.ndarray  # [n, H, W] int64
    splits: dict[str, list[int]]
    params: GenParams
    _pixels: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    def split(self, name: str) -> list[int]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def class_pixels(self, index: int, k: int) -> np.ndarray:
        """Flat pixel indices of class ``k`` in image ``index`` (cached)."""
        key = (index, k)
        if key not in self._pixels:
            self._pixels[key] = np.flatnonzero(self.masks[index].reshape(-1) == k)
        return self._pixels[key]

    def save(self, path) -> None:
        meta = {"kind": "dataset", "gen_params": asdict(self.params), "splits": self.splits}
        container.write(path, meta, {"images": self.images, "masks": self.masks})

    @classmethod
    def load(cls, path) -> "SynthDataset":
        meta, arrays = container.read(path)
        if meta.get("kind") != "dataset":
            raise container.CorruptFileError(f"expected a dataset container, got {meta.get('kind')!r}", 16)
        gp = meta["gen_params"]
        gp["contrasts"] = tuple(tuple(r) for r in gp["contrasts"])
        return cls(arrays["images"], arrays["masks"], {k: list(v) for k, v in meta["splits"].items()},
                   GenParams(**gp))


def _class_counts(rng, params: GenParams, n_pix: int) -> list[int]:
    lo, hi = params.class_fraction
    cmin, cmax = int(np.ceil(lo * n_pix)), int(np.floor(hi * n_pix))
    return [int(np.clip(round(rng.uniform(lo, hi) * n_pix), cmin, cmax))
            for _ in range(params.num_classes - 1)]


def _one_image(rng, params: GenParams) -> tuple[np.ndarray, np.ndarray]:
    S, K = params.image_size, params.num_classes
    n_pix = S * S
    lesion_field = gaussian_filter(rng.standard_normal((S, S)), params.blob_sigma, mode="reflect")
    counts = _class_counts(rng, params, n_pix)

    order = np.argsort(-lesion_field.reshape(-1), kind="stable")
    mask = np.zeros(n_pix, dtype=np.int64)
    start = 0
    for k in range(K - 1, 0, -1):
        mask[order[start:start + counts[k - 1]]] = k
        start += counts[k - 1]
    mask = mask.reshape(S, S)

    contrasts = np.asarray(params.contrasts)
    image = np.empty((params.in_channels, S, S))
    soft = [gaussian_filter((mask == k).astype(np.float64), params.edge_blur) if params.edge_blur > 0
            else (mask == k).astype(np.float64) for k in range(K)]
    for c in range(params.in_channels):
        bg = gaussian_filter(rng.standard_normal((S, S)), params.background_sigma, mode="reflect")
        bg *= params.background_amplitude / max(bg.std(), 1e-12)
        x = bg + params.noise * rng.standard_normal((S, S))
        for k in range(K):
            x += contrasts[c, k] * soft[k]
        x = (x - x.mean()) / max(x.std(), 1e-12)
        image[c] = np.clip(x, -CLIP, CLIP)
    return image, mask


def generate(params: GenParams) -> SynthDataset:
    """Deterministic in ``params`` (including ``params.seed``)."""
    params.validate()
    root = np.random.SeedSequence(params.seed)
    images, masks = [], []
    for child in root.spawn(params.n_images):
        img, m = _one_image(np.random.default_rng(child), params)
        images.append(img)
        masks.append(m)

    n = params.n_images
    n_train = int(round(params.split_fractions[0] * n))
    n_val = int(round(params.split_fractions[1] * n))
    n_test = min(int(round(params.split_fractions[2] * n)), n - n_train - n_val)
    splits = {"train": list(range(n_train)),
              "val": list(range(n_train, n_train + n_val)),
              "test": list(range(n_train + n_val, n_train + n_val + n_test))}
    ds = SynthDataset(np.stack(images), np.stack(masks), splits, params)

    present = set(np.unique(ds.masks[splits["train"]]).tolist()) if splits["train"] else set()
    missing = sorted(set(range(params.num_classes)) - present)
    if missing:
        raise InfeasibleParamsError(f"training split lacks classes {missing}")
    return ds


@dataclass
class Patch:
    image: np.ndarray  # [C, p, p]
    mask: np.ndarray  # [p, p]
    source: int  # dataset image index
    center: tuple[int, int]  # the sampled pixel, in source image coordinates
    foreground: bool


def sample_patches(ds: SynthDataset, split: str, patch_size: int, foreground_prob: float,
                   count: int, seed: int) -> list[Patch]:
    """Draw ``count`` patches around sampled pixels.

    With probability ``foreground_prob`` the pixel comes from a foreground
    class chosen uniformly among those present in the split (then a uniform
    image containing it, then a uniform pixel); otherwise it is a uniform
    background pixel. Near the border the window is shifted inwards, so the
    sampled pixel is always inside the patch but not always at its centre.
    """
    if not 0.0 <= foreground_prob <= 1.0:
        raise ValueError(f"foreground_prob must be in [0, 1], got {foreground_prob}")
    idx = ds.split(split)
    if not idx:
        raise NoCandidateError(f"split {split!r} is empty")
    S = ds.params.image_size
    if not 1 <= patch_size <= S:
        raise ValueError(f"patch_size {patch_size} outside [1, {S}]")

    holders = {k: [i for i in idx if ds.class_pixels(i, k).size] for k in range(ds.num_classes)}
    fg_classes = [k for k in range(1, ds.num_classes) if holders[k]]
    if foreground_prob > 0 and not fg_classes:
        raise NoCandidateError(f"split {split!r} has no foreground pixels to centre patches on")
    if foreground_prob < 1 and not holders[0]:
        raise NoCandidateError(f"split {split!r} has no background pixels to centre patches on")

    rng = np.random.default_rng(seed)
    half = patch_size // 2
    out = []
    for _ in range(count):
        is_fg = rng.random() < foreground_prob
        k = fg_classes[rng.integers(len(fg_classes))] if is_fg else 0
        src = holders[k][rng.integers(len(holders[k]))]
        pix = ds.class_pixels(src, k)
        flat = int(pix[rng.integers(pix.size)])
        r, c = divmod(flat, S)
        top = int(np.clip(r - half, 0, S - patch_size))
        left = int(np.clip(c - half, 0, S - patch_size))
        out.append(Patch(ds.images[src, :, top:top + patch_size, left:left + patch_size],
                         ds.masks[src, top:top + patch_size, left:left + patch_size],
                         src, (r, c), is_fg))
    return out


def stack_patches(patches: list[Patch]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.image for p in patches]), np.stack([p.mask for p in patches])
