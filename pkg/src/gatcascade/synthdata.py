"""Procedural face-alignment data with known answers.

Each sample is a rigid model posed at random, projected, and deformed by a
smooth per-landmark offset. Its feature map carries a Gaussian bump at every
true landmark, in a channel chosen by the landmark's group, so a regressor
that reads the map locally can recover the truth. The "estimated" pose used
for initialisation is the true pose plus noise, standing in for a backbone's
pose error.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .geometry import BehindCameraError, CameraIntrinsics, HeadPose, RigidFaceModel, project


@dataclass(frozen=True)
class SynthConfig:
    image_side: int = 256
    feature_side: int = 64
    channels: int = 8
    groups: int = 8
    yaw_range: float = 30.0
    pitch_range: float = 20.0
    roll_range: float = 20.0
    tx_range: float = 0.1
    ty_range: float = 0.1
    tz_range: tuple[float, float] = (3.6, 4.4)
    deformation: float = 4.0
    deformation_corr: float = 1.5
    bump_width: float = 1.5
    bump_amplitude: float = 1.0
    noise: float = 0.1
    init_angle_std: tuple[float, float, float] = (8.0, 8.0, 5.0)
    init_trans_std: float = 0.12
    init_depth_std: float = 0.05
    margin: float = 8.0
    render_images: bool = False
    store_feature_maps: bool = False
    seed: int = 0
    count: int = 100

    def __post_init__(self):
        if self.deformation < 0:
            raise ConfigError("deformation amplitude must be >= 0")
        if self.bump_width <= 0:
            raise ConfigError("bump width must be > 0")
        if not 1 <= self.groups <= self.channels:
            raise ConfigError("groups must be between 1 and the channel count")
        if self.image_side % self.feature_side:
            raise ConfigError("feature side must divide image side")
        lo, hi = self.tz_range
        if not 0 < lo <= hi:
            raise ConfigError("tz range must be positive and ordered")
        if max(self.yaw_range, self.pitch_range) >= 80:
            raise ConfigError("yaw/pitch ranges must stay inside the observable cone (< 80 deg)")
        if self.count < 0:
            raise ConfigError("count must be >= 0")
        object.__setattr__(self, "tz_range", (float(lo), float(hi)))
        object.__setattr__(self, "init_angle_std", tuple(float(a) for a in self.init_angle_std))

    @property
    def stride(self) -> float:
        return self.image_side / self.feature_side

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tz_range"] = list(self.tz_range)
        d["init_angle_std"] = list(self.init_angle_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthdata config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("tz_range", "init_angle_std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SynthSample:
    id: str
    truth: np.ndarray
    pose: HeadPose
    init_pose: HeadPose
    map_seed: int
    feature_map: np.ndarray | None = None
    image: np.ndarray | None = None
    subset: str | None = None


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for one sample, derived from (seed, index)."""
    return np.random.default_rng([int(seed), int(index), int(stream)])


@lru_cache(maxsize=32)
def _groups_cached(points_key: bytes, L: int, groups: int) -> tuple[int, ...]:
    xy = np.frombuffer(points_key, dtype=np.float64).reshape(L, 3)[:, :2]
    assigned: list[list[int]] = [[] for _ in range(groups)]
    out = []
    for l in range(L):
        best, best_d = 0, -1.0
        for g in range(groups):
            d = np.inf if not assigned[g] else float(np.min(np.linalg.norm(xy[assigned[g]] - xy[l], axis=1)))
            if d > best_d + 1e-12:
                best, best_d = g, d
        assigned[best].append(l)
        out.append(best)
    return tuple(out)


def channel_groups(model: RigidFaceModel, groups: int) -> np.ndarray:
    """Greedy group assignment keeping same-group landmarks far apart on the frontal model."""
    pts = np.ascontiguousarray(model.points, dtype=np.float64)
    return np.array(_groups_cached(pts.tobytes(), pts.shape[0], int(groups)))


def smooth_deformation(L: int, sigma: float, corr: float, rng: np.random.Generator) -> np.ndarray:
    """(L, 2) Gaussian offsets with std ``sigma``, smoothed along the landmark index."""
    if sigma == 0:
        return np.zeros((L, 2))
    if corr <= 0:
        return rng.normal(0.0, sigma, size=(L, 2))
    r = int(math.ceil(3 * corr))
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / corr) ** 2)
    k /= np.sqrt((k * k).sum())
    white = rng.normal(0.0, sigma, size=(L + 2 * r, 2))
    return np.stack([np.convolve(white[:, c], k, mode="valid") for c in range(2)], axis=1)


def gen_feature_map(
    truth: np.ndarray, cfg: SynthConfig, rng: np.random.Generator, groups: np.ndarray
) -> np.ndarray:
    """(C, H, W) map: Gaussian bumps at the true landmarks plus white noise.

    Landmark ``l`` contributes ``amplitude * exp(-d^2 / (2 sigma_b^2))`` to
    channel ``groups[l]``; channels at or beyond ``cfg.groups`` carry noise only.
    """
    S = cfg.feature_side
    u = np.asarray(truth, dtype=float) / cfg.stride
    grid = np.arange(S, dtype=float)
    two_s2 = 2.0 * cfg.bump_width**2
    gx = np.exp(-((grid[None, :] - u[:, 0:1]) ** 2) / two_s2)
    gy = np.exp(-((grid[None, :] - u[:, 1:2]) ** 2) / two_s2)
    bumps = (gy[:, :, None] * gx[:, None, :]).reshape(len(u), S * S)
    onehot = np.zeros((cfg.groups, len(u)))
    onehot[groups, np.arange(len(u))] = cfg.bump_amplitude
    F = np.zeros((cfg.channels, S, S))
    F[: cfg.groups] = (onehot @ bumps).reshape(cfg.groups, S, S)
    if cfg.noise > 0:
        F += rng.normal(0.0, cfg.noise, size=F.shape)
    return F


def render_image(truth: np.ndarray, cfg: SynthConfig, rng: np.random.Generator, groups: np.ndarray) -> np.ndarray:
    """(3, S, S) picture: coloured blobs at the landmarks over a noisy background."""
    S = cfg.image_side
    sigma = cfg.bump_width * cfg.stride
    grid = np.arange(S, dtype=float)
    gx = np.exp(-((grid[None, :] - truth[:, 0:1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((grid[None, :] - truth[:, 1:2]) ** 2) / (2 * sigma**2))
    bumps = (gy[:, :, None] * gx[:, None, :]).reshape(len(truth), S * S)
    colour = np.zeros((3, len(truth)))
    colour[groups % 3, np.arange(len(truth))] = 1.0
    img = (colour @ bumps).reshape(3, S, S)
    return img + rng.normal(0.0, cfg.noise, size=img.shape)


def _draw_pose(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    return np.array(
        [
            math.radians(rng.uniform(-cfg.yaw_range, cfg.yaw_range)),
            math.radians(rng.uniform(-cfg.pitch_range, cfg.pitch_range)),
            math.radians(rng.uniform(-cfg.roll_range, cfg.roll_range)),
            rng.uniform(-cfg.tx_range, cfg.tx_range),
            rng.uniform(-cfg.ty_range, cfg.ty_range),
            rng.uniform(*cfg.tz_range),
        ]
    )


def perturb_pose(p: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    q = np.array(p, dtype=float)
    q[:3] += np.radians(np.asarray(cfg.init_angle_std)) * rng.standard_normal(3)
    q[3:5] += cfg.init_trans_std * rng.standard_normal(2)
    q[5] *= math.exp(cfg.init_depth_std * rng.standard_normal())
    return q


def gen_sample(
    model: RigidFaceModel,
    cam: CameraIntrinsics,
    cfg: SynthConfig,
    rng: np.random.Generator,
    index: int = 0,
    max_tries: int = 100,
) -> SynthSample:
    """Draw one sample; poses whose shape leaves the image are redrawn."""
    L = model.num_points
    lo, hi = cfg.margin, cfg.image_side - 1 - cfg.margin
    for _ in range(max_tries):
        p = _draw_pose(cfg, rng)
        deform = smooth_deformation(L, cfg.deformation, cfg.deformation_corr, rng)
        try:
            truth = project(model, p, cam) + deform
        except BehindCameraError:
            continue
        if truth.min() < lo or truth.max() > hi:
            continue
        q = perturb_pose(p, cfg, rng)
        if q[5] <= 0:
            continue
        map_seed = int(rng.integers(0, 2**31 - 1))
        sample = SynthSample(
            id=f"s{index:06d}",
            truth=truth,
            pose=HeadPose.from_array(p),
            init_pose=HeadPose.from_array(q),
            map_seed=map_seed,
        )
        groups = channel_groups(model, cfg.groups)
        if cfg.store_feature_maps:
            sample.feature_map = gen_feature_map(truth, cfg, np.random.default_rng(map_seed), groups)
        if cfg.render_images:
            sample.image = render_image(truth, cfg, np.random.default_rng([map_seed, 1]), groups)
        return sample
    raise ContractError(f"could not draw an in-bounds sample in {max_tries} tries; check pose ranges")


class Dataset:
    """Samples plus everything needed to rebuild their feature maps."""

    def __init__(self, samples: list[SynthSample], config: SynthConfig, model: RigidFaceModel, camera=None):
        self.samples = list(samples)
        self.config = config
        self.model = model
        self.camera = camera if camera is not None else CameraIntrinsics.default(config.image_side)
        self._groups = channel_groups(model, config.groups)
        self._init_shapes = None

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def groups(self) -> np.ndarray:
        return self._groups

    def feature_map(self, i: int) -> np.ndarray:
        s = self.samples[i]
        if s.feature_map is not None:
            return s.feature_map
        return gen_feature_map(s.truth, self.config, np.random.default_rng(s.map_seed), self._groups)

    def feature_maps(self, idx) -> np.ndarray:
        return np.stack([self.feature_map(int(i)) for i in idx])

    def image(self, i: int) -> np.ndarray:
        s = self.samples[i]
        if s.image is not None:
            return s.image
        return render_image(s.truth, self.config, np.random.default_rng([s.map_seed, 1]), self._groups)

    def images(self, idx) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in idx])

    def truths(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([self.samples[int(i)].truth for i in idx])

    def init_shapes(self, idx=None) -> np.ndarray:
        if self._init_shapes is None:
            self._init_shapes = np.stack([project(self.model, s.init_pose, self.camera) for s in self.samples])
        return self._init_shapes if idx is None else self._init_shapes[np.asarray(idx, dtype=int)]

    def poses(self, idx=None, which: str = "pose") -> np.ndarray:
        idx = range(len(self)) if idx is None else idx
        return np.stack([getattr(self.samples[int(i)], which).as_array() for i in idx])


def generate_dataset(model: RigidFaceModel, cfg: SynthConfig, camera=None, start: int = 0) -> Dataset:
    """``cfg.count`` samples, each from its own ``(seed, index)`` generator."""
    cam = camera if camera is not None else CameraIntrinsics.default(cfg.image_side)
    samples = [gen_sample(model, cam, cfg, sample_rng(cfg.seed, i), index=i) for i in range(start, start + cfg.count)]
    return Dataset(samples, cfg, model, cam)


# ----------------------------------------------------------------------- io

BLOB_MAGIC = b"SPDS"
BLOB_VERSION = 1
DATASET_VERSION = 1
_FLAG_MAPS = 1
_FLAG_IMAGES = 2


def _sample_record(s: SynthSample) -> dict:
    rec = {
        "id": s.id,
        "landmarks": np.asarray(s.truth).tolist(),
        "pose": s.pose.as_array().tolist(),
        "init_pose": s.init_pose.as_array().tolist(),
        "map_seed": int(s.map_seed),
    }
    if s.subset is not None:
        rec["subset"] = s.subset
    return rec


def encode_blob(samples: list[SynthSample]) -> bytes:
    """Stored feature maps and images behind a checksummed offset table.

    Header ``SPDS, u32 version, u32 count, u32 flags``; then ``count`` rows of
    ``(u64 map_offset, u64 map_bytes, u64 image_offset, u64 image_bytes)``
    with offsets relative to the data section; then ``u32 CRC32`` of the
    table; then the f64 arrays.
    """
    flags = 0
    if samples and all(s.feature_map is not None for s in samples):
        flags |= _FLAG_MAPS
    if samples and all(s.image is not None for s in samples):
        flags |= _FLAG_IMAGES
    rows, chunks, off = [], [], 0
    for s in samples:
        row = []
        for flag, arr in ((_FLAG_MAPS, s.feature_map), (_FLAG_IMAGES, s.image)):
            if flags & flag:
                b = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                row += [off, len(b)]
                chunks.append(b)
                off += len(b)
            else:
                row += [0, 0]
        rows.append(row)
    table = b"".join(struct.pack("<4Q", *r) for r in rows)
    head = BLOB_MAGIC + struct.pack("<III", BLOB_VERSION, len(samples), flags)
    return head + table + struct.pack("<I", zlib.crc32(table) & 0xFFFFFFFF) + b"".join(chunks)


def decode_blob(data: bytes, count: int, map_shape: tuple, image_shape: tuple, source: str = "blob"):
    """Inverse of :func:`encode_blob`; returns per-sample ``(map, image)`` (``None`` when absent)."""
    if len(data) < 16 or data[:4] != BLOB_MAGIC:
        raise FormatError(f"{source}: bad magic, not a dataset blob")
    version, n, flags = struct.unpack("<III", data[4:16])
    if version != BLOB_VERSION:
        raise FormatError(f"{source}: blob version {version}, this build reads {BLOB_VERSION}")
    if n != count:
        raise FormatError(f"{source}: blob holds {n} samples, annotations list {count}")
    tlen = 32 * n
    if len(data) < 16 + tlen + 4:
        raise FormatError(f"{source}: truncated offset table")
    table = data[16 : 16 + tlen]
    (crc,) = struct.unpack("<I", data[16 + tlen : 20 + tlen])
    if zlib.crc32(table) & 0xFFFFFFFF != crc:
        raise FormatError(f"{source}: offset table checksum mismatch (corrupted)")
    payload = memoryview(data)[20 + tlen :]
    want = {_FLAG_MAPS: int(np.prod(map_shape)) * 8, _FLAG_IMAGES: int(np.prod(image_shape)) * 8}
    out = []
    for i in range(n):
        row = struct.unpack("<4Q", table[32 * i : 32 * (i + 1)])
        got = []
        for k, (flag, shape) in enumerate(((_FLAG_MAPS, map_shape), (_FLAG_IMAGES, image_shape))):
            off, nb = row[2 * k], row[2 * k + 1]
            if not flags & flag:
                got.append(None)
                continue
            if nb != want[flag]:
                raise FormatError(f"{source}: sample {i} array has {nb} bytes, expected {want[flag]}")
            if off + nb > len(payload):
                raise FormatError(f"{source}: sample {i} data runs past end of file (truncated)")
            got.append(np.frombuffer(payload, dtype="<f8", count=nb // 8, offset=off).reshape(shape).astype(np.float64))
        out.append(tuple(got))
    return out


def write_dataset(path, dataset: Dataset) -> None:
    """Directory with ``annotations.jsonl``, ``data.bin`` and ``manifest.json`` (written last)."""
    from .fileio import atomic_write_bytes, atomic_write_text

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps(_sample_record(s)) + "\n" for s in dataset.samples)
    atomic_write_text(root / "annotations.jsonl", lines)
    blob = encode_blob(dataset.samples)
    atomic_write_bytes(root / "data.bin", blob)
    cam = dataset.camera
    manifest = {
        "format": "gatcascade-dataset",
        "version": DATASET_VERSION,
        "count": len(dataset),
        "config": dataset.config.to_dict(),
        "camera": {"focal": cam.focal, "cx": cam.cx, "cy": cam.cy, "side": cam.side},
        "model": dataset.model.to_json(),
        "annotations": "annotations.jsonl",
        "blob": "data.bin",
        "blob_crc32": zlib.crc32(blob) & 0xFFFFFFFF,
    }
    atomic_write_text(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{root}: no manifest.json (missing or incomplete dataset)")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc.msg})") from None
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{mpath}: dataset version {manifest.get('version')}, this build reads {DATASET_VERSION}")
    cfg = SynthConfig.from_dict(manifest["config"])
    model = RigidFaceModel.from_json(manifest["model"])
    cam = CameraIntrinsics(**manifest["camera"])
    samples = []
    apath = root / manifest.get("annotations", "annotations.jsonl")
    with open(apath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(
                    SynthSample(
                        id=str(rec["id"]),
                        truth=np.asarray(rec["landmarks"], dtype=float),
                        pose=HeadPose.from_array(rec["pose"]),
                        init_pose=HeadPose.from_array(rec["init_pose"]),
                        map_seed=int(rec["map_seed"]),
                        subset=rec.get("subset"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{apath}:{lineno}: bad annotation record ({exc})") from None
    if len(samples) != manifest["count"]:
        raise FormatError(f"{apath}: {len(samples)} records, manifest says {manifest['count']}")
    blob = (root / manifest.get("blob", "data.bin")).read_bytes()
    map_shape = (cfg.channels, cfg.feature_side, cfg.feature_side)
    image_shape = (3, cfg.image_side, cfg.image_side)
    arrays = decode_blob(blob, len(samples), map_shape, image_shape, str(root / "data.bin"))
    if zlib.crc32(blob) & 0xFFFFFFFF != manifest.get("blob_crc32"):
        raise FormatError(f"{root / 'data.bin'}: blob checksum mismatch")
    for s, (fmap, img) in zip(samples, arrays):
        s.feature_map, s.image = fmap, img
    return Dataset(samples, cfg, model, cam)
