"""Synthetic-shift benchmark data: procedural clean images, paired tasks, TNSR on disk.

Clean images are superpositions of Gaussian blobs and rectangles squashed into
(-1,1), so both smooth structure and edges exist for SSIM to measure. Every
sample is generated from its own RNG stream keyed by (seed, split, index):
datasets are byte-identical across runs and machines for a given spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import read_tnsr, write_tnsr

SPLITS = ("train", "calib", "id_test", "ood_test")
_SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}
_STYLE_TASK_GAMMA = 0.5
_INDEX_VERSION = 1


@dataclass(frozen=True)
class ShiftParams:
    """OOD perturbations relative to the training distribution."""

    noise_mult: float = 2.0
    gamma: float = 1.0
    blur: float = 0.0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "denoise"  # denoise: y = clean, x = clean + noise; style: y = remap(clean)
    image_size: int = 32
    train: int = 512
    calib: int = 128
    id_test: int = 256
    ood_test: int = 256
    noise_sigma: float = 0.2
    # fraction of the noise drawn from a spatially-correlated (smooth) field:
    # structured corruption survives translation, white noise mostly does not
    noise_mix: float = 0.7
    shift: ShiftParams = field(default_factory=ShiftParams)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("denoise", "style"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.image_size < 8 or self.image_size % 4 != 0:
            raise ValueError("image_size must be >= 8 and divisible by 4")
        for split in SPLITS:
            if getattr(self, split) <= 0:
                raise ValueError(f"{split} size must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.noise_mix <= 1.0:
            raise ValueError("noise_mix must be in [0,1]")

    def split_size(self, split: str) -> int:
        return getattr(self, split)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        if "shift" in d and isinstance(d["shift"], dict):
            d["shift"] = ShiftParams(**d["shift"])
        return SyntheticTaskSpec(**d)


def _clean_image(size: int, rng: np.random.Generator) -> np.ndarray:
    # fixed component counts and tight amplitude ranges keep per-image
    # reconstruction difficulty uniform, which keeps the eps_y calibration tight
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.zeros((size, size), dtype=np.float64)
    for _ in range(3):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        s = rng.uniform(0.10, 0.22)
        amp = rng.uniform(0.5, 0.9) * rng.choice([-1.0, 1.0])
        img += amp * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * s * s)))
    x0, y0 = rng.uniform(0.1, 0.6, size=2)
    w, h = rng.uniform(0.2, 0.35, size=2)
    amp = rng.uniform(0.4, 0.7) * rng.choice([-1.0, 1.0])
    img += amp * ((xx >= x0) & (xx <= x0 + w) & (yy >= y0) & (yy <= y0 + h))
    return np.tanh(1.2 * img).astype(np.float32)


def _contrast_remap(img: np.ndarray, gamma: float) -> np.ndarray:
    u = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    return (2.0 * np.power(u, gamma) - 1.0).astype(np.float32)


def _noise_field(shape, mix: float, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(shape)
    if mix == 0.0:
        return white
    smooth = gaussian_filter(rng.standard_normal(shape), 2.5)
    smooth /= smooth.std() + 1e-12
    return (1.0 - mix) * white + mix * smooth


def make_pair(spec: SyntheticTaskSpec, split: str, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (x, y) pair, both [1,S,S] float32 in [-1,1]."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng((spec.seed, _SPLIT_CODES[split], index))
    clean = _clean_image(spec.image_size, rng)
    y = clean if spec.kind == "denoise" else _contrast_remap(clean, _STYLE_TASK_GAMMA)
    shifted = split == "ood_test"
    base = clean
    if shifted and spec.shift.gamma != 1.0:
        base = _contrast_remap(base, spec.shift.gamma)
    if shifted and spec.shift.blur > 0.0:
        base = gaussian_filter(base, spec.shift.blur).astype(np.float32)
    sigma = spec.noise_sigma * (spec.shift.noise_mult if shifted else 1.0)
    x = base + sigma * _noise_field(base.shape, spec.noise_mix, rng)
    x = np.clip(x, -1.0, 1.0).astype(np.float32)
    return x[None], y[None]


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    # split -> list of (sample_id, x, y)
    samples: dict[str, list[tuple[str, np.ndarray, np.ndarray]]]

    def pairs(self, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(x, y) for _, x, y in self.samples[split]]

    def ids(self, split: str) -> list[str]:
        return [sid for sid, _, _ in self.samples[split]]


def synthesize(spec: SyntheticTaskSpec) -> Dataset:
    """Generate the whole dataset in memory."""
    samples = {}
    for split in SPLITS:
        rows = []
        for i in range(spec.split_size(split)):
            x, y = make_pair(spec, split, i)
            rows.append((f"{split}-{i:04d}", x, y))
        samples[split] = rows
    return Dataset(spec=spec, samples=samples)


def _sample_files(split: str, index: int) -> tuple[str, str]:
    return f"{split}/{index:04d}.x.tnsr", f"{split}/{index:04d}.y.tnsr"


def dataset_content_hash(root: Path, spec: SyntheticTaskSpec) -> str:
    h = hashlib.sha256()
    for split in SPLITS:
        for i in range(spec.split_size(split)):
            for rel in _sample_files(split, i):
                h.update(rel.encode())
                h.update((root / rel).read_bytes())
    return h.hexdigest()


def gen_dataset(spec: SyntheticTaskSpec, outdir, dump_pgm: bool = False) -> Dataset:
    """Write TNSR pairs plus a JSON index under outdir; returns the dataset."""
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    ds = synthesize(spec)
    for split in SPLITS:
        (root / split).mkdir(exist_ok=True)
        for i, (sid, x, y) in enumerate(ds.samples[split]):
            relx, rely = _sample_files(split, i)
            write_tnsr(root / relx, x)
            write_tnsr(root / rely, y)
            if dump_pgm:
                write_pgm(root / f"{split}/{i:04d}.x.pgm", x[0])
                write_pgm(root / f"{split}/{i:04d}.y.pgm", y[0])
    index = {
        "version": _INDEX_VERSION,
        "spec": spec.to_dict(),
        "splits": {s: spec.split_size(s) for s in SPLITS},
        "content_sha256": dataset_content_hash(root, spec),
    }
    (root / "index.json").write_text(json.dumps(index, indent=2))
    return ds


def load_dataset(path, verify: bool = True) -> Dataset:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("version") != _INDEX_VERSION:
        raise ValueError(f"unsupported dataset index version {index.get('version')}")
    spec = SyntheticTaskSpec.from_dict(index["spec"])
    if verify:
        actual = dataset_content_hash(root, spec)
        if actual != index["content_sha256"]:
            raise ValueError(f"dataset content hash mismatch under {root}")
    samples = {}
    for split in SPLITS:
        rows = []
        for i in range(spec.split_size(split)):
            relx, rely = _sample_files(split, i)
            rows.append((f"{split}-{i:04d}", read_tnsr(root / relx), read_tnsr(root / rely)))
        samples[split] = rows
    return Dataset(spec=spec, samples=samples)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from a [-1,1] grayscale image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2-D image, got shape {img.shape}")
    u8 = np.clip(np.rint((img + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())
