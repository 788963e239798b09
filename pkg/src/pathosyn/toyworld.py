"""Procedural toy subjects with known substrate/deviation split, and the dataset layout.

On-disk layout of a dataset directory::

    manifest.json          format_version, resolution, subject ids, split map,
                           SHA-256 of every array file
    <id>.x.f32             observed image            (little-endian float32, row-major)
    <id>.truthsub.f32      generator's clean anatomy
    <id>.truthdev.f32      generator's planted deviation
    <id>.xph.f32           cached harmonic inpainting reference
    <id>.m.u8              lesion mask, one byte per site
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng
from .substrate import inpaint_reference

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
FLOAT_FIELDS = {"x": "x", "truth_sub": "truthsub", "truth_dev": "truthdev", "x_ph": "xph"}
DEFAULT_SPLIT = (0.8, 0.1, 0.1)
SPLITS = ("train", "val", "test")


class DatasetError(Exception):
    """Missing, corrupt or inconsistent dataset files."""


@dataclass(frozen=True)
class ToyParams:
    resolution: int = 64
    head_axes: tuple = ((22.0, 27.0), (18.0, 23.0))
    ventricle_axes: tuple = ((3.0, 6.0), (1.5, 3.0))
    tissue_band: tuple = (0.40, 0.55)
    ventricle_band: tuple = (0.12, 0.22)
    rim_band: tuple = (0.60, 0.75)
    bias_amplitude: float = 0.05
    blob_count: tuple = (1, 2)
    blob_radius: tuple = (4.0, 8.0)
    amplitude_range: tuple = (0.15, 0.35)
    negative_fraction: float = 0.3
    texture_corr_length: float = 2.0
    texture_strength: float = 0.3
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(tuple(x) if isinstance(x, list) else x for x in v))
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        lo, hi = self.blob_count
        if not 0 <= lo <= hi:
            raise ValueError("blob_count must be an ordered nonnegative range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ValueError("negative_fraction must lie in [0, 1]")
        if self.texture_corr_length <= 0:
            raise ValueError("texture_corr_length must be positive")

    @classmethod
    def for_resolution(cls, resolution: int, **overrides) -> "ToyParams":
        """Default geometry rescaled from the 64-pixel reference."""
        s = resolution / 64.0
        scaled = dict(
            resolution=resolution,
            head_axes=tuple((a * s, b * s) for a, b in cls.head_axes),
            ventricle_axes=tuple((a * s, b * s) for a, b in cls.ventricle_axes),
            blob_radius=(cls.blob_radius[0] * s, cls.blob_radius[1] * s),
            texture_corr_length=cls.texture_corr_length * s,
        )
        scaled.update(overrides)
        return cls(**scaled)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class SubjectRecord:
    id: str
    x: np.ndarray
    m: np.ndarray
    truth_sub: np.ndarray
    truth_dev: np.ndarray
    x_ph: np.ndarray = field(default=None)

    @property
    def has_lesion(self) -> bool:
        return bool(self.m.any())


def _ellipse(yy, xx, cy, cx, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2


def _anatomy(g: np.random.Generator, p: ToyParams, yy, xx):
    res = p.resolution
    cy = (res - 1) / 2 + g.uniform(-1.5, 1.5) * res / 64
    cx = (res - 1) / 2 + g.uniform(-1.5, 1.5) * res / 64
    a = g.uniform(*p.head_axes[0])
    b = g.uniform(*p.head_axes[1])
    theta = g.uniform(-0.2, 0.2)
    head = _ellipse(yy, xx, cy, cx, a, b, theta)

    img = np.zeros((res, res))
    img[head <= 1.08**2] = g.uniform(*p.rim_band)
    img[head <= 1.0] = g.uniform(*p.tissue_band)

    va = g.uniform(*p.ventricle_axes[0])
    vb = g.uniform(*p.ventricle_axes[1])
    offset = 0.25 * b
    v_int = g.uniform(*p.ventricle_band)
    for sign in (-1.0, 1.0):
        vy = cy + sign * offset * math.cos(theta)
        vx = cx - sign * offset * math.sin(theta)
        img[_ellipse(yy, xx, vy, vx, vb, va, theta) <= 1.0] = v_int

    img = ndimage.gaussian_filter(img, sigma=0.7 * res / 64, mode="constant")

    # low-frequency multiplicative bias inside the head
    bias = np.zeros_like(img)
    for _ in range(3):
        fy, fx = g.uniform(-1.0, 1.0, size=2)
        phase = g.uniform(0, 2 * math.pi)
        bias += np.cos(2 * math.pi * (fy * yy + fx * xx) / res + phase)
    bias *= p.bias_amplitude / 3.0
    img = np.clip(img * (1.0 + bias), 0.0, 1.0)
    return img, (cy, cx, a, b, theta)


def _place_blob(g, p: ToyParams, head_geom, yy, xx, attempt_log):
    cy, cx, a, b, theta = head_geom
    angles = np.linspace(0, 2 * math.pi, 48, endpoint=False)
    for attempt in range(100):
        r = g.uniform(*p.blob_radius)
        by = g.uniform(cy - b, cy + b)
        bx = g.uniform(cx - a, cx + a)
        r_max = 1.3 * r
        ry = by + r_max * np.sin(angles)
        rx = bx + r_max * np.cos(angles)
        # strictly inside the head with a one-pixel margin
        if np.all(_ellipse(ry, rx, cy, cx, a - 1.0, b - 1.0, theta) < 1.0):
            harmonics = [(k, g.uniform(0.0, 0.15), g.uniform(0, 2 * math.pi)) for k in (2, 3)]
            ang = np.arctan2(yy - by, xx - bx)
            radius = r * (1.0 + sum(amp * np.cos(k * ang + ph) for k, amp, ph in harmonics))
            return np.hypot(yy - by, xx - bx) <= radius
        attempt_log.append((round(by, 2), round(bx, 2), round(r, 2)))
    raise RuntimeError(
        f"could not place a lesion blob inside the head after 100 attempts "
        f"(head centre=({cy:.1f},{cx:.1f}) axes=({a:.1f},{b:.1f}); last tries {attempt_log[-3:]})"
    )


def generate_subject(params: ToyParams, rng_key, subject_id: str | None = None) -> SubjectRecord:
    """Deterministic subject for ``(params, rng_key)``; ``rng_key`` is an int or tuple."""
    key = tuple(rng_key) if isinstance(rng_key, (tuple, list)) else (rng_key,)
    g = rng.generator(params.seed, "subject", *key)
    res = params.resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)

    sub, head_geom = _anatomy(g, params, yy, xx)

    n_blobs = int(g.integers(params.blob_count[0], params.blob_count[1] + 1))
    m = np.zeros((res, res), dtype=bool)
    dev = np.zeros((res, res))
    texture = ndimage.gaussian_filter(g.standard_normal((res, res)), params.texture_corr_length, mode="wrap")
    texture /= texture.std() + 1e-12
    for _ in range(n_blobs):
        blob = _place_blob(g, params, head_geom, yy, xx, [])
        amp = g.uniform(*params.amplitude_range)
        if g.uniform() < params.negative_fraction:
            amp = -amp
        dev[blob] = amp * (1.0 + params.texture_strength * texture[blob])
        m |= blob
    # keep the composed image inside [0, 1]; deviation stays supported on m
    truth_dev = (np.clip(sub + dev, 0.0, 1.0) - sub) * m

    noise = params.noise_std * g.standard_normal((res, res))
    x = np.clip(sub + truth_dev + noise, 0.0, 1.0)

    x32 = x.astype(np.float32)
    if m.any():
        x_ph, _ = inpaint_reference(x32.astype(np.float64), m.astype(np.uint8))
    else:
        x_ph = x32.astype(np.float64)
    return SubjectRecord(
        id=subject_id if subject_id is not None else "s" + "-".join(str(k) for k in key),
        x=x32,
        m=m.astype(np.uint8),
        truth_sub=sub.astype(np.float32),
        truth_dev=truth_dev.astype(np.float32),
        x_ph=x_ph.astype(np.float32),
    )


def generate_corpus(params: ToyParams, n: int, lesion_free_frac: float = 0.0) -> list[SubjectRecord]:
    """``n`` subjects with ids s0000.. ; a seeded fraction of them carry no lesion."""
    if not 0.0 <= lesion_free_frac <= 1.0:
        raise ValueError("lesion_free_frac must lie in [0, 1]")
    n_free = int(round(lesion_free_frac * n))
    free = set(rng.generator(params.seed, "lesion-free").permutation(n)[:n_free].tolist())
    lesion_free = ToyParams(**{**asdict(params), "blob_count": (0, 0)})
    return [
        generate_subject(lesion_free if i in free else params, i, subject_id=f"s{i:04d}")
        for i in range(n)
    ]


def assign_splits(ids, ratios=DEFAULT_SPLIT, seed: int = 0) -> dict:
    """Subject-level train/val/test split; a pure function of (seed, ids, ratios)."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError("split ratios must be three nonnegative numbers summing to 1")
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    n = len(ids)
    order = rng.generator(seed, "split").permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    shuffled = [ids[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train:n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val:]),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_array(path: Path, a: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(a, dtype=np.dtype(dtype)).tobytes(order="C"))


def write_dataset(records, directory, *, resolution: int | None = None,
                  ratios=DEFAULT_SPLIT, split_seed: int = 0, extra: dict | None = None) -> dict:
    """Write records plus manifest; returns the manifest dict."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if records:
        shapes = {r.x.shape for r in records}
        if len(shapes) != 1:
            raise ValueError(f"records have mixed shapes {shapes}")
        (h, w), = shapes
        if h != w:
            raise ValueError("toy datasets are square")
        if resolution is not None and resolution != h:
            raise ValueError(f"records are {h}x{w}, manifest says {resolution}")
        resolution = h
    checksums = {}
    for r in records:
        if not r.id or "/" in r.id or r.id.startswith("."):
            raise ValueError(f"invalid subject id {r.id!r}")
        for attr, suffix in FLOAT_FIELDS.items():
            value = getattr(r, attr)
            if value is None:
                raise ValueError(f"subject {r.id}: missing field {attr}")
            fname = f"{r.id}.{suffix}.f32"
            _write_array(directory / fname, value, "<f4")
            checksums[fname] = _sha256(directory / fname)
        fname = f"{r.id}.m.u8"
        _write_array(directory / fname, r.m, "u1")
        checksums[fname] = _sha256(directory / fname)
    ids = [r.id for r in records]
    manifest = {
        "format_version": FORMAT_VERSION,
        "resolution": resolution,
        "subjects": ids,
        "splits": assign_splits(ids, ratios, split_seed),
        "split_ratios": list(ratios),
        "split_seed": split_seed,
        "checksums": dict(sorted(checksums.items())),
    }
    if extra:
        manifest["generator"] = extra
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


class Dataset:
    """Records of a dataset directory, addressable by id and by split."""

    def __init__(self, manifest: dict, records: list[SubjectRecord]):
        self.manifest = manifest
        self.records = records
        self._by_id = {r.id: r for r in records}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, subject_id: str) -> SubjectRecord:
        try:
            return self._by_id[subject_id]
        except KeyError:
            raise KeyError(f"unknown subject {subject_id!r}") from None

    def __contains__(self, subject_id) -> bool:
        return subject_id in self._by_id

    def split(self, name: str) -> list[SubjectRecord]:
        return [self._by_id[i] for i in self.manifest["splits"][name]]

    def split_of(self, subject_id: str) -> str:
        for name in SPLITS:
            if subject_id in self.manifest["splits"][name]:
                return name
        raise KeyError(subject_id)


def read_manifest(directory) -> dict:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format_version {manifest.get('format_version')!r}")
    return manifest


def _read_array(directory: Path, fname: str, manifest: dict, dtype: str, subject: str) -> np.ndarray:
    path = directory / fname
    if not path.is_file():
        raise DatasetError(f"subject {subject}: missing file {path}")
    expected = manifest["checksums"].get(fname)
    if expected is None:
        raise DatasetError(f"subject {subject}: {fname} not listed in manifest")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != expected:
        raise DatasetError(f"subject {subject}: checksum mismatch for {path}")
    res = manifest["resolution"]
    a = np.frombuffer(raw, dtype=np.dtype(dtype))
    if a.size != res * res:
        raise DatasetError(f"subject {subject}: {fname} holds {a.size} values, expected {res * res}")
    return a.reshape(res, res).astype(np.dtype(dtype).newbyteorder("="))


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    records = []
    for sid in manifest["subjects"]:
        arrays = {attr: _read_array(directory, f"{sid}.{suffix}.f32", manifest, "<f4", sid)
                  for attr, suffix in FLOAT_FIELDS.items()}
        m = _read_array(directory, f"{sid}.m.u8", manifest, "u1", sid)
        if not np.all(m <= 1):
            raise DatasetError(f"subject {sid}: mask has values other than 0/1")
        records.append(SubjectRecord(id=sid, m=m, **arrays))
    return Dataset(manifest, records)
