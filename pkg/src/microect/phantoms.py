"""Synthetic permittivity phantoms, measurement noise and on-disk datasets."""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .forward import ForwardModel, PhysicalPermittivity, measurement_mask
from .geometry import DomainSpec

IMG_H, IMG_W = 100, 200
FORMAT_VERSION = 1
DATA_MAGIC = b"ECTD"


class GenerationError(RuntimeError):
    pass


class InvalidSplitError(ValueError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "microsphere"
    # microspheres
    count: tuple[int, int] = (1, 3)
    radius_um: tuple[float, float] = (10.0, 20.0)
    center_depth_um: tuple[float, float] = (5.0, 80.0)
    # biofilm
    thickness_um: tuple[float, float] = (10.0, 60.0)
    roughness_um: tuple[float, float] = (0.0, 20.0)
    correlation_um: tuple[float, float] = (20.0, 60.0)
    voids: tuple[int, int] = (0, 0)
    void_radius_um: tuple[float, float] = (3.0, 8.0)
    image_shape: tuple[int, int] = (IMG_H, IMG_W)

    def __post_init__(self):
        if self.kind not in ("microsphere", "biofilm"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        h, w = self.image_shape
        for name in ("count", "radius_um", "center_depth_um", "thickness_um",
                     "roughness_um", "correlation_um", "voids", "void_radius_um"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {lo} > {hi}")
            if lo < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.radius_um[0] <= 0 or self.void_radius_um[0] <= 0:
            raise ValueError("radii must be positive")
        if self.count[0] < 1:
            raise ValueError("at least one microsphere is required")
        if 2 * self.radius_um[0] > min(h, w) or self.center_depth_um[0] >= h:
            raise ValueError("microsphere ranges do not fit the window")
        if self.thickness_um[1] > h or self.correlation_um[0] <= 0:
            raise ValueError("biofilm ranges do not fit the window")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class NoiseModel:
    std: float = 0.03

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("noise std must be non-negative")


def disk_coverage(shape: tuple[int, int], zc: float, yc: float, r: float,
                  supersample: int = 16) -> np.ndarray:
    """Fraction of each 1 um pixel covered by a disk (pixel ``(i, j)`` spans
    ``[i, i+1] x [j, j+1]``), estimated on a ``supersample^2`` sub-grid."""
    h, w = shape
    out = np.zeros(shape)
    r0, r1 = max(int(np.floor(zc - r)), 0), min(int(np.ceil(zc + r)), h)
    c0, c1 = max(int(np.floor(yc - r)), 0), min(int(np.ceil(yc + r)), w)
    if r0 >= r1 or c0 >= c1:
        return out
    s = (np.arange(supersample) + 0.5) / supersample
    zz = (np.arange(r0, r1)[:, None] + s[None, :]).ravel()
    yy = (np.arange(c0, c1)[:, None] + s[None, :]).ravel()
    inside = ((zz[:, None] - zc) ** 2 + (yy[None, :] - yc) ** 2) <= r * r
    block = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    out[r0:r1, c0:c1] = block
    return out


def _microspheres(spec: PhantomSpec, rng: np.random.Generator,
                  max_attempts: int = 1000) -> np.ndarray:
    h, w = spec.image_shape
    count = int(rng.integers(spec.count[0], spec.count[1] + 1))
    disks: list[tuple[float, float, float]] = []
    attempts = 0
    while len(disks) < count:
        if attempts >= max_attempts:
            raise GenerationError(
                f"could not place {count} non-overlapping spheres in {max_attempts} attempts")
        attempts += 1
        r = rng.uniform(*spec.radius_um)
        zlo, zhi = max(spec.center_depth_um[0], r), min(spec.center_depth_um[1], h - r)
        if zlo > zhi:
            continue
        zc = rng.uniform(zlo, zhi)
        yc = rng.uniform(r, w - r)
        if all(np.hypot(zc - z2, yc - y2) > r + r2 for z2, y2, r2 in disks):
            disks.append((zc, yc, r))
    img = np.zeros((h, w))
    for zc, yc, r in disks:
        img += disk_coverage((h, w), zc, yc, r)
    return np.clip(img, 0.0, 1.0)


def _biofilm(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_shape
    base = rng.uniform(*spec.thickness_um)
    amp = rng.uniform(*spec.roughness_um)
    corr = rng.uniform(*spec.correlation_um)
    field_ = gaussian_filter1d(rng.standard_normal(w), sigma=corr / 2.0, mode="wrap")
    sd = field_.std()
    profile = np.full(w, base)
    if sd > 0 and amp > 0:
        profile += amp * field_ / sd
    profile = np.clip(profile, 1.0, h - 1.0)
    rows = np.arange(h)[:, None]
    img = np.clip(profile[None, :] - rows, 0.0, 1.0)
    n_voids = int(rng.integers(spec.voids[0], spec.voids[1] + 1))
    for _ in range(n_voids):
        r = rng.uniform(*spec.void_radius_um)
        yc = rng.uniform(r, w - r)
        top = profile[int(np.clip(yc, 0, w - 1))]
        if top <= 2 * r:
            continue
        zc = rng.uniform(r, top - r)
        img = img * (1.0 - disk_coverage((h, w), zc, yc, r))
    return img


def gen_phantom(spec: PhantomSpec, rng_seed) -> np.ndarray:
    """One ``(100, 200)`` ground-truth image; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    if spec.kind == "microsphere":
        return _microspheres(spec, rng)
    return _biofilm(spec, rng)


def add_noise(c: np.ndarray, noise: NoiseModel, rng_seed) -> np.ndarray:
    """Additive zero-mean Gaussian noise on the valid (non-padded) entries.

    ``c`` may be a single ``(m, n)`` matrix or a stack ``(..., m, n)``.
    """
    c = np.asarray(c)
    out = c.copy()
    if noise.std == 0:
        return out
    rng = np.random.default_rng(rng_seed)
    mask = measurement_mask(*c.shape[-2:])
    draws = rng.normal(0.0, noise.std, size=c.shape[:-2] + (int(mask.sum()),))
    out[..., mask] = c[..., mask] + draws.astype(c.dtype, copy=False)
    return out


@dataclass
class Dataset:
    capacitances: np.ndarray          # (N, m, n) float32, normalized, clean
    images: np.ndarray                # (N, 100, 200) float32
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.capacitances) != len(self.images):
            raise ValueError("capacitance and image counts differ")
        self.manifest = dict(self.manifest)
        self.manifest["count"] = len(self.images)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i):
        return self.capacitances[i], self.images[i]

    def subset(self, indices, tag: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        manifest = dict(self.manifest)
        if tag is not None:
            manifest["subset"] = tag
        return Dataset(self.capacitances[indices], self.images[indices], manifest)


def _simulate(args):
    fm, spec, seed, index = args
    try:
        img = gen_phantom(spec, np.random.SeedSequence([seed, index]))
        c = fm(img)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise GenerationError(f"sample {index}: {exc}") from exc
    return c.astype(np.float32), img.astype(np.float32)


def build_dataset(count: int, phantom_spec: PhantomSpec | None = None,
                  domain_spec: DomainSpec | None = None,
                  phys: PhysicalPermittivity | None = None,
                  noise: NoiseModel | None = None, seed: int = 0,
                  workers: int = 1, solver: str = "direct",
                  progress=None) -> Dataset:
    """Simulate ``count`` (capacitance, image) pairs.

    Capacitances are stored clean and normalized against the empty and full
    window; ``noise`` is only recorded in the manifest and applied at
    training time.  Sample ``k`` uses the RNG stream ``SeedSequence([seed, k])``.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    phantom_spec = phantom_spec or PhantomSpec()
    domain_spec = domain_spec or DomainSpec()
    phys = phys or PhysicalPermittivity()
    noise = noise or NoiseModel()
    fm = ForwardModel.create(domain_spec, phys, solver=solver)
    fm.c_empty, fm.c_full  # calibrate once before fanning out

    jobs = [(fm, phantom_spec, seed, k) for k in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate, jobs, chunksize=8))
    else:
        results = []
        for job in jobs:
            results.append(_simulate(job))
            if progress is not None:
                progress(len(results), count)
    caps = np.stack([r[0] for r in results])
    imgs = np.stack([r[1] for r in results])
    m, n = caps.shape[1:]
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": count,
        "m": int(m),
        "n": int(n),
        "img_h": int(imgs.shape[1]),
        "img_w": int(imgs.shape[2]),
        "domain_spec": domain_spec.to_dict(),
        "phantom_spec": phantom_spec.to_dict(),
        "physical": phys.to_dict(),
        "noise_std": noise.std,
        "seed": seed,
        "normalization": "full_empty",
    }
    return Dataset(caps, imgs, manifest)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffled train/val/test partition.

    Validation and test sizes are ``floor(fraction * N)``; the remainder goes
    to training.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise InvalidSplitError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(dataset)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise InvalidSplitError(f"{n} samples give an empty split ({n_train}/{n_val}/{n_test})")
    order = np.random.default_rng(seed).permutation(n)
    return (dataset.subset(order[:n_train], "train"),
            dataset.subset(order[n_train:n_train + n_val], "val"),
            dataset.subset(order[n_train + n_val:], "test"))


def write_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    caps = np.ascontiguousarray(dataset.capacitances, dtype="<f4")
    imgs = np.ascontiguousarray(dataset.images, dtype="<f4")
    manifest = dict(dataset.manifest)
    manifest.update(format_version=FORMAT_VERSION, count=len(dataset),
                    m=int(caps.shape[1]), n=int(caps.shape[2]),
                    img_h=int(imgs.shape[1]), img_w=int(imgs.shape[2]))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    records = np.concatenate([caps.reshape(len(dataset), -1), imgs.reshape(len(dataset), -1)], axis=1)
    with open(path / "samples.bin", "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(records.tobytes())


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    try:
        count, m, n = int(manifest["count"]), int(manifest["m"]), int(manifest["n"])
        h, w = int(manifest["img_h"]), int(manifest["img_w"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing field: {exc}") from exc
    raw = (path / "samples.bin").read_bytes()
    if len(raw) < 8:
        raise FormatError("truncated header", len(raw))
    if raw[:4] != DATA_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    rec = 4 * (m * n + h * w)
    body = len(raw) - 8
    if body % rec != 0:
        raise FormatError("truncated record", 8 + (body // rec) * rec)
    if body // rec != count:
        raise FormatError(f"manifest count {count} != {body // rec} records on disk",
                          8 + min(body, count * rec))
    data = np.frombuffer(raw, dtype="<f4", offset=8).reshape(count, -1)
    caps = data[:, : m * n].reshape(count, m, n).astype(np.float32)
    imgs = data[:, m * n:].reshape(count, h, w).astype(np.float32)
    return Dataset(caps, imgs, manifest)


def default_workers() -> int:
    env = os.environ.get("ECT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
