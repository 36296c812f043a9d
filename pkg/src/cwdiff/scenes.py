"""Procedural micro-scenes and a hemisphere-quadrature renderer.

Per-pixel environment maps live in each pixel's local shading frame (z along
the normal), sampled at ``C`` fixed quadrature directions. Arrays are batched
with a leading scene axis: N, A, I, S, I_d, I_s are (n, 3, H, W); D, R are
(n, H, W); E is (n, H, W, C, 3).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .numerics import kernels
from .tensorio import ChecksumError, decode_tensors, sha256, write_blob, write_json

F0 = 0.04
MIN_ROUGHNESS = 0.05
DEPTH_BOUNDS = (0.5, 8.0)
DATASET_FORMAT = 1


@dataclass(frozen=True)
class SceneConfig:
    height: int = 16
    width: int = 16
    n_dirs: int = 16
    anchors: tuple[int, int] = (2, 4)
    lobes: tuple[int, int] = (1, 3)
    regions: tuple[int, int] = (2, 5)
    intensity: tuple[float, float] = (0.1, 20.0)
    sharpness: tuple[float, float] = (2.0, 40.0)
    slope: float = 0.1
    fov_deg: float = 60.0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


@dataclass
class Quadrature:
    dirs: np.ndarray  # (C, 3) local frame, z > 0
    weights: np.ndarray  # (C,) solid angle


@dataclass
class SceneTensors:
    N: np.ndarray
    D: np.ndarray
    A: np.ndarray
    R: np.ndarray
    E: np.ndarray
    I: np.ndarray
    S: np.ndarray
    I_d: np.ndarray
    I_s: np.ndarray

    def __len__(self) -> int:
        return self.N.shape[0]

    def subset(self, idx) -> "SceneTensors":
        return SceneTensors(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def concat(cls, items: list["SceneTensors"]) -> "SceneTensors":
        return cls(**{f.name: np.concatenate([getattr(s, f.name) for s in items])
                      for f in fields(cls)})


def hemisphere_quadrature(C: int) -> Quadrature:
    """Fibonacci spiral over the upper hemisphere, equal weights 2*pi/C.

    Heights are the midpoints of C equal-area bands, so the cosine-weighted
    sum is exactly pi.
    """
    if C < 4:
        raise ValueError(f"need at least 4 directions, got {C}")
    j = np.arange(C, dtype=np.float64)
    z = 1.0 - (j + 0.5) / C
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = j * math.pi * (3.0 - math.sqrt(5.0))
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return Quadrature(dirs, np.full(C, 2.0 * math.pi / C))


def tangent_frames(n: np.ndarray):
    """Orthonormal (t, b) completing unit normals ``n`` (..., 3)."""
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(nz >= 0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    bxy = nx * ny * a
    t = np.stack([1.0 + sign * nx * nx * a, sign * bxy, -sign * nx], axis=-1)
    b = np.stack([bxy, sign + ny * ny * a, -ny], axis=-1)
    return t, b


def world_dirs(normals: np.ndarray, quad: Quadrature) -> np.ndarray:
    """Quadrature directions rotated into each pixel's frame: (P, 3) -> (P, C, 3)."""
    t, b = tangent_frames(normals)
    d = quad.dirs
    return (t[:, None, :] * d[None, :, 0:1] + b[:, None, :] * d[None, :, 1:2]
            + normals[:, None, :] * d[None, :, 2:3])


def to_local(normals: np.ndarray, vec: np.ndarray) -> np.ndarray:
    t, b = tangent_frames(normals)
    return np.stack([(t * vec).sum(-1), (b * vec).sum(-1), (normals * vec).sum(-1)], axis=-1)


def view_dirs(height: int, width: int, fov_deg: float = 60.0) -> np.ndarray:
    """Unit directions from surface to a pinhole camera looking down -z: (3, H, W)."""
    half = math.tan(math.radians(fov_deg) / 2)
    ys = (1.0 - 2.0 * (np.arange(height) + 0.5) / height) * half
    xs = (2.0 * (np.arange(width) + 0.5) / width - 1.0) * half * width / height
    x, y = np.meshgrid(xs, ys)
    v = np.stack([-x, -y, np.ones_like(x)])
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def _pixels(x: np.ndarray) -> np.ndarray:
    """(n, 3, H, W) -> (n*H*W, 3)."""
    return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])


def _image(p: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.moveaxis(p.reshape(n, h, w, -1), -1, 1)


def _env_pixels(E: np.ndarray) -> np.ndarray:
    return E.reshape(-1, E.shape[-2], 3)


def render_diffuse(A, N, E, quad: Quadrature):
    """Lambertian term. Returns (I_d, S) with I_d = A * S and
    S = (1/pi) sum_j E_j max(0, N.w_j) w_j."""
    n, _, h, w = N.shape
    normals = _pixels(N)
    cos = np.maximum((world_dirs(normals, quad) * normals[:, None, :]).sum(-1), 0.0)
    cos_l = (cos * quad.weights / math.pi).astype(E.dtype)
    env = _env_pixels(E)
    d, _ = kernels.shade(env, cos_l, np.zeros_like(cos_l))
    S = _image(d, n, h, w)
    return A * S, S


def blinn_exponent(R: np.ndarray) -> np.ndarray:
    R = np.maximum(R, MIN_ROUGHNESS)
    return np.maximum(1.0, 2.0 / (R * R) - 2.0)


def specular_weights(R_pix, normals, views, quad: Quadrature) -> np.ndarray:
    """Per-pixel, per-direction specular factor times solid angle: (P, C)."""
    v_loc = to_local(normals, views)
    d = quad.dirs[None, :, :]
    hvec = d + v_loc[:, None, :]
    hvec /= np.maximum(np.linalg.norm(hvec, axis=-1, keepdims=True), 1e-12)
    p = blinn_exponent(R_pix)[:, None]
    n_dot_h = np.maximum(hvec[..., 2], 0.0)
    lobe = (p + 2.0) / (2.0 * math.pi) * n_dot_h ** p
    cos_l = np.maximum(d[..., 2], 0.0)
    w_dot_h = np.maximum((d * hvec).sum(-1), 1e-6)
    return F0 * lobe * cos_l / (4.0 * w_dot_h) * quad.weights


def render_specular(R, N, E, V, quad: Quadrature):
    """Normalized Blinn lobe, F0 = 0.04, exponent max(1, 2/R^2 - 2), with the
    half-vector Jacobian 1/(4 w.h). V is (3, H, W) or (n, 3, H, W)."""
    n, _, h, w = N.shape
    if V.ndim == 3:
        V = np.broadcast_to(V, N.shape)
    sw = specular_weights(R.reshape(-1), _pixels(N), _pixels(V), quad).astype(E.dtype)
    _, s = kernels.shade(_env_pixels(E), np.zeros_like(sw), sw)
    return _image(s, n, h, w)


def render(A, R, N, E, V, quad: Quadrature):
    """Returns (I, S, I_d, I_s)."""
    I_d, S = render_diffuse(A, N, E, quad)
    I_s = render_specular(R, N, E, V, quad)
    return I_d + I_s, S, I_d, I_s


def _smooth_field(rng, h, w, n_modes=6, max_freq=2.0):
    u, v = np.meshgrid(np.linspace(0, 1, w), np.linspace(0, 1, h))
    f = np.zeros((h, w))
    for _ in range(n_modes):
        kx, ky = rng.uniform(-max_freq, max_freq, size=2)
        ph = rng.uniform(0, 2 * math.pi)
        amp = rng.normal() / (1.0 + math.hypot(kx, ky))
        f += amp * np.cos(2 * math.pi * (kx * u + ky * v) + ph)
    return f


def _lobe_env(rng, cfg: SceneConfig):
    n_lobes = int(rng.integers(cfg.lobes[0], cfg.lobes[1] + 1))
    mus, kappas, colors = [], [], []
    for _ in range(n_lobes):
        z = rng.uniform(0.15, 1.0)
        phi = rng.uniform(0, 2 * math.pi)
        r = math.sqrt(1 - z * z)
        mus.append((r * math.cos(phi), r * math.sin(phi), z))
        kappas.append(math.exp(rng.uniform(*np.log(cfg.sharpness))))
        inten = math.exp(rng.uniform(*np.log(cfg.intensity)))
        tint = rng.uniform(0.7, 1.0, size=3)
        colors.append(inten * tint / tint.max())
    return np.array(mus), np.array(kappas), np.array(colors)


def _eval_lobes(dirs, lobes):
    mus, kappas, colors = lobes
    cosang = dirs @ mus.T  # (..., L)
    return np.exp(kappas * (cosang - 1.0)) @ colors  # (..., 3)


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneTensors:
    rng = rngmod.stream(seed, "scene")
    h, w = cfg.height, cfg.width
    quad = hemisphere_quadrature(cfg.n_dirs)

    height = _smooth_field(rng, h, w)
    gy, gx = np.gradient(height, 1.0 / max(h - 1, 1), 1.0 / max(w - 1, 1))
    slope = cfg.slope * rng.uniform(0.2, 1.0)
    nrm = np.stack([-slope * gx, -slope * gy, np.ones_like(gx)])
    nrm /= np.linalg.norm(nrm, axis=0, keepdims=True)

    base = math.exp(rng.uniform(math.log(1.0), math.log(5.0)))
    tilt = rng.uniform(-0.3, 0.3, size=2) * base
    u, v = np.meshgrid(np.linspace(-0.5, 0.5, w), np.linspace(-0.5, 0.5, h))
    depth = base + tilt[0] * u + tilt[1] * v - 0.1 * base * height
    depth = np.clip(depth, DEPTH_BOUNDS[0] * 1.05, DEPTH_BOUNDS[1] * 0.95)

    n_reg = int(rng.integers(cfg.regions[0], cfg.regions[1] + 1))
    centers = rng.uniform(0, 1, size=(n_reg, 2))
    uu, vv = np.meshgrid(np.linspace(0, 1, w), np.linspace(0, 1, h))
    d2 = (uu[..., None] - centers[:, 0]) ** 2 + (vv[..., None] - centers[:, 1]) ** 2
    label = d2.argmin(-1)
    albedo_tab = rng.uniform(0.05, 0.95, size=(n_reg, 3))
    rough_tab = rng.uniform(0.1, 1.0, size=n_reg)
    albedo = np.moveaxis(albedo_tab[label], -1, 0)
    rough = rough_tab[label]

    n_anchor = int(rng.integers(cfg.anchors[0], cfg.anchors[1] + 1))
    anchors = [_lobe_env(rng, cfg) for _ in range(n_anchor)]
    corner = list(range(n_anchor)) + list(rng.integers(0, n_anchor, size=4 - n_anchor))
    corner = [corner[i] for i in rng.permutation(4)]
    normals = nrm.reshape(3, -1).T
    wd = world_dirs(normals, quad)  # (P, C, 3)
    ex = np.linspace(0, 1, w)
    ey = np.linspace(0, 1, h)
    bx, by = np.meshgrid(ex, ey)
    bil = np.stack([(1 - bx) * (1 - by), bx * (1 - by), (1 - bx) * by, bx * by]).reshape(4, -1)
    env = np.zeros(wd.shape[:2] + (3,))
    for k in range(4):
        env += bil[k][:, None, None] * _eval_lobes(wd, anchors[corner[k]])
    env = env.reshape(h, w, cfg.n_dirs, 3)

    f32 = np.float32
    N = nrm[None].astype(f32)
    A = albedo[None].astype(f32)
    R = rough[None].astype(f32)
    E = env[None].astype(f32)
    V = view_dirs(h, w, cfg.fov_deg)
    I, S, I_d, I_s = render(A, R, N, E, V, quad)
    return SceneTensors(N=N, D=depth[None].astype(f32), A=A, R=R, E=E,
                        I=I.astype(f32), S=S.astype(f32), I_d=I_d.astype(f32), I_s=I_s.astype(f32))


def scene_seeds(root_seed: int, split: str, count: int) -> list[int]:
    return [rngmod.stream_seed(root_seed, f"scene/{split}/{i}") & 0x7FFFFFFF for i in range(count)]


def make_split(root_seed: int, split: str, count: int, cfg: SceneConfig = SceneConfig()) -> SceneTensors:
    return SceneTensors.concat([gen_scene(s, cfg) for s in scene_seeds(root_seed, split, count)])


# -- normalization --------------------------------------------------------------

_LOG_D = (math.log(DEPTH_BOUNDS[0]), math.log(DEPTH_BOUNDS[1]))


def normalize_depth(D):
    """log-depth mapped affinely from [log 0.5, log 8] to [-1, 1]; returns (value, n_clamped)."""
    ld = np.log(np.maximum(D, 1e-12))
    z = 2.0 * (ld - _LOG_D[0]) / (_LOG_D[1] - _LOG_D[0]) - 1.0
    n_clamped = int(np.count_nonzero((z < -1) | (z > 1)))
    return np.clip(z, -1.0, 1.0), n_clamped


def denormalize_depth(z):
    ld = (np.asarray(z, dtype=np.float64) + 1.0) * 0.5 * (_LOG_D[1] - _LOG_D[0]) + _LOG_D[0]
    return np.exp(ld)


def to_unit_range(x):
    return 2.0 * np.asarray(x) - 1.0


def from_unit_range(z):
    return (np.asarray(z) + 1.0) * 0.5


# -- dataset persistence ----------------------------------------------------------

def write_dataset(splits: dict[str, SceneTensors], path, *, seed: int, config: SceneConfig,
                  seeds: dict[str, list[int]] | None = None) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = {}
    for name, scenes in splits.items():
        digest = write_blob(path / f"{name}.bin", scenes.arrays())
        blobs[name] = {"file": f"{name}.bin", "sha256": digest, "count": len(scenes)}
    manifest = {
        "format_version": DATASET_FORMAT,
        "seed": seed,
        "config": asdict(config),
        "counts": {k: len(v) for k, v in splits.items()},
        "blobs": blobs,
    }
    if seeds is not None:
        manifest["scene_seeds"] = seeds
    write_json(path / "manifest.json", manifest)
    return manifest


def read_dataset(path) -> tuple[dict[str, SceneTensors], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text("utf-8"))
    if manifest.get("format_version") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    splits = {}
    for name, info in manifest["blobs"].items():
        data = (path / info["file"]).read_bytes()
        if sha256(data) != info["sha256"]:
            raise ChecksumError(f"checksum mismatch for split {name!r} ({info['file']})")
        tensors = decode_tensors(data)
        splits[name] = SceneTensors(**tensors)
    return splits, manifest


def with_albedo_light_scale(scene: SceneTensors, factor: float, quad: Quadrature, V) -> SceneTensors:
    """(A, E) -> (A/factor, factor*E), re-rendered."""
    A = scene.A / factor
    E = scene.E * factor
    I, S, I_d, I_s = render(A, scene.R, scene.N, E, V, quad)
    return replace(scene, A=A, E=E, I=I, S=S, I_d=I_d, I_s=I_s)
