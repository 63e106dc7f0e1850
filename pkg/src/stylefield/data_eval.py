"""Datasets, analytic synthetic scenes, PSNR and depth-based warp error."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .renderer import CameraModel, look_at, ray_bundle
from .tensor_io import ContainerError, read_tensor, write_tensor

PSNR_INF = math.inf
SNAP_EPS = 1e-9


class EmptyMaskError(ValueError):
    """Warp error is undefined when no pixel survives the validity mask."""


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    shape: str  # "sphere" | "box"
    center: tuple
    size: tuple  # sphere: (radius,), box: half extents
    albedo: tuple
    region: int
    yaw: float = 0.0  # box rotation about +y, radians


@dataclass
class SyntheticSceneSpec:
    objects: list
    seed: int = 0
    aabb_min: tuple = (-1.0, -1.0, -1.0)
    aabb_max: tuple = (1.0, 1.0, 1.0)
    light_dir: tuple = (0.4, 0.8, 0.45)  # direction towards the light
    ambient: float = 0.3
    orbit_radius: float = 3.2
    elevation_deg: tuple = (15.0, 40.0)
    fov_deg: float = 40.0

    def validate(self):
        lo, hi = np.asarray(self.aabb_min, float), np.asarray(self.aabb_max, float)
        if not self.objects:
            raise ValueError("scene needs at least one object")
        ids = sorted({o.region for o in self.objects})
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("region IDs must be dense from 1")
        for o in self.objects:
            if o.shape not in ("sphere", "box"):
                raise ValueError(f"unknown shape {o.shape!r}")
            c = np.asarray(o.center, float)
            ext = o.size[0] if o.shape == "sphere" else float(np.linalg.norm(o.size))
            if np.any(c - ext < lo - 1e-9) or np.any(c + ext > hi + 1e-9):
                raise ValueError("object extends outside the AABB")
            if min(o.size) <= 0:
                raise ValueError("object sizes must be positive")
        if self.orbit_radius <= float(np.linalg.norm(hi - lo)) / 2:
            raise ValueError("cameras must orbit outside the AABB")

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items() if k != "objects"}
        d["objects"] = [o.__dict__ for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        objs = [SceneObject(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in o.items()})
                for o in d.pop("objects")]
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        return cls(objs, **d)


def toy_scene_spec(seed=0):
    """Three objects: red sphere, green rotated box, blue sphere."""
    return SyntheticSceneSpec(
        [
            SceneObject("sphere", (-0.35, -0.15, 0.2), (0.45,), (0.85, 0.25, 0.2), 1),
            SceneObject("box", (0.45, -0.2, -0.25), (0.3, 0.35, 0.3), (0.25, 0.75, 0.3), 2, yaw=0.5),
            SceneObject("sphere", (0.1, 0.4, -0.3), (0.3,), (0.25, 0.35, 0.9), 3),
        ],
        seed=seed,
    )


def two_region_spec(seed=0):
    """Two objects with distinct semantics, for stylization checks."""
    return SyntheticSceneSpec(
        [
            SceneObject("sphere", (-0.45, 0.0, 0.0), (0.42,), (0.75, 0.7, 0.65), 1),
            SceneObject("box", (0.45, 0.0, 0.0), (0.3, 0.3, 0.3), (0.6, 0.65, 0.7), 2, yaw=0.3),
        ],
        seed=seed,
    )


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = (oc * d).sum(1)
    cc = (oc * oc).sum(1) - r * r
    disc = b * b - cc
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0))
    t0, t1 = -b - sq, -b + sq
    tt = np.where(t0 > 1e-9, t0, t1)
    ok &= tt > 1e-9
    t[ok] = tt[ok]
    p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    n = (p - c) / r
    return t, n


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _hit_box(o, d, c, half, yaw):
    R = _rot_y(yaw)  # local -> world
    ol = (o - c) @ R
    dl = d @ R
    half = np.asarray(half, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tn = tmin.max(1)
    tf = tmax.min(1)
    ok = (tn <= tf) & (tn > 1e-9)
    t = np.where(ok, tn, np.inf)
    axis = tmin.argmax(1)
    nl = np.zeros_like(ol)
    rows = np.arange(len(o))
    nl[rows, axis] = -np.sign(dl[rows, axis])
    return t, nl @ R.T


def trace_rays(spec: SyntheticSceneSpec, o, d):
    """Analytic ray casting; returns ``(rgb [N,3], depth [N] (inf on miss), region [N])``."""
    best = np.full(len(o), np.inf)
    normal = np.zeros((len(o), 3))
    albedo = np.zeros((len(o), 3))
    region = np.zeros(len(o), dtype=np.int64)
    for ob in spec.objects:
        c = np.asarray(ob.center, float)
        if ob.shape == "sphere":
            t, n = _hit_sphere(o, d, c, ob.size[0])
        else:
            t, n = _hit_box(o, d, c, ob.size, ob.yaw)
        closer = t < best
        best[closer] = t[closer]
        normal[closer] = n[closer]
        albedo[closer] = ob.albedo
        region[closer] = ob.region
    light = np.asarray(spec.light_dir, float)
    light /= np.linalg.norm(light)
    lam = np.clip((normal * light).sum(1), 0, None)
    rgb = albedo * (spec.ambient + (1 - spec.ambient) * lam)[:, None]
    rgb[~np.isfinite(best)] = 0.0
    return rgb, best, region


def orbit_cameras(spec: SyntheticSceneSpec, n_views, H, W):
    rng = np.random.default_rng(spec.seed)
    half_diag = float(np.linalg.norm(np.subtract(spec.aabb_max, spec.aabb_min))) / 2
    f = 0.5 * W / math.tan(math.radians(spec.fov_deg) / 2)
    center = (np.asarray(spec.aabb_min, float) + np.asarray(spec.aabb_max, float)) / 2
    lo, hi = spec.elevation_deg
    cams = []
    for i in range(n_views):
        az = 2 * math.pi * i / n_views + rng.uniform(-0.1, 0.1)
        el = math.radians(lo + (hi - lo) * ((i * 0.618034) % 1.0))
        r = spec.orbit_radius
        eye = center + r * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(CameraModel(f, f, W / 2, H / 2, H, W, look_at(eye, center),
                                max(r - half_diag, 0.05), r + half_diag))
    return cams


@dataclass
class SceneDataset:
    images: list
    cameras: list
    aabb_min: np.ndarray
    aabb_max: np.ndarray
    labels: list = None
    depths: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if len(self.images) != len(self.cameras):
            raise ValueError("one camera per image required")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError("all images must share one size")

    def __len__(self):
        return len(self.images)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.aabb_max - self.aabb_min))

    def subset(self, idx):
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]
        return SceneDataset(pick(self.images), pick(self.cameras), self.aabb_min, self.aabb_max,
                            pick(self.labels), pick(self.depths), dict(self.meta))


def render_ground_truth(spec: SyntheticSceneSpec, cam: CameraModel):
    o, d = ray_bundle(cam)
    rgb, depth, region = trace_rays(spec, o, d)
    return (rgb.reshape(cam.H, cam.W, 3).astype(np.float32), depth.reshape(cam.H, cam.W),
            region.reshape(cam.H, cam.W))


def generate_synthetic_scene(spec: SyntheticSceneSpec, n_views, size=(64, 64)) -> SceneDataset:
    if n_views < 2:
        raise ValueError("need at least two views")
    spec.validate()
    H, W = size
    cams = orbit_cameras(spec, n_views, H, W)
    images, depths, labels = [], [], []
    for cam in cams:
        rgb, depth, region = render_ground_truth(spec, cam)
        images.append(rgb)
        depths.append(depth)
        labels.append(region)
    return SceneDataset(images, cams, spec.aabb_min, spec.aabb_max, labels, depths, {"spec": spec.to_dict()})


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------


def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def save_png(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")


def load_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_dataset(ds: SceneDataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for i, img in enumerate(ds.images):
        save_png(os.path.join(out_dir, "images", f"{i:04d}.png"), img)
        if ds.depths is not None:
            write_tensor(os.path.join(out_dir, "depth", f"{i:04d}.fpt"), ds.depths[i].astype(np.float32))
        if ds.labels is not None:
            lab = np.zeros(ds.labels[i].shape + (3,), dtype=np.uint8)
            lab[..., 0] = ds.labels[i]
            save_png(os.path.join(out_dir, "semantic", f"{i:04d}.png"), lab)
    with open(os.path.join(out_dir, "poses.json"), "w") as f:
        json.dump({"views": [c.to_dict() for c in ds.cameras]}, f, indent=1, sort_keys=True)
    H, W = ds.images[0].shape[:2]
    meta = {"aabb_min": ds.aabb_min.tolist(), "aabb_max": ds.aabb_max.tolist(),
            "n_views": len(ds), "H": H, "W": W}
    meta.update(ds.meta)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def validate_dataset(root):
    """List of problems with a dataset directory; empty when valid."""
    problems = []
    for name in ("poses.json", "meta.json"):
        if not os.path.isfile(os.path.join(root, name)):
            problems.append(f"missing {name}")
    if problems:
        return problems
    try:
        with open(os.path.join(root, "poses.json")) as f:
            views = json.load(f)["views"]
        with open(os.path.join(root, "meta.json")) as f:
            meta = json.load(f)
    except (OSError, ValueError, KeyError) as e:
        return [f"unreadable metadata: {e}"]
    if len(views) < 2:
        problems.append("fewer than two views")
    lo, hi = np.asarray(meta.get("aabb_min", [0] * 3)), np.asarray(meta.get("aabb_max", [0] * 3))
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        problems.append("meta.json has an invalid AABB")
    size = None
    for i, v in enumerate(views):
        try:
            cam = CameraModel.from_dict(v)
        except (KeyError, ValueError, TypeError) as e:
            problems.append(f"view {i}: bad camera ({e})")
            continue
        p = os.path.join(root, "images", f"{i:04d}.png")
        if not os.path.isfile(p):
            problems.append(f"view {i}: missing image")
            continue
        with Image.open(p) as im:
            wh = im.size
        if wh != (cam.W, cam.H):
            problems.append(f"view {i}: image size {wh} does not match camera {cam.W}x{cam.H}")
        if size is None:
            size = wh
        elif wh != size:
            problems.append(f"view {i}: image size differs from view 0")
        dp = os.path.join(root, "depth", f"{i:04d}.fpt")
        if os.path.isdir(os.path.join(root, "depth")) and os.path.isfile(dp):
            try:
                d = read_tensor(dp)
                if d.shape != (cam.H, cam.W):
                    problems.append(f"view {i}: depth shape {d.shape}")
            except (ContainerError, OSError) as e:
                problems.append(f"view {i}: bad depth ({e})")
    return problems


def load_dataset(root) -> SceneDataset:
    problems = validate_dataset(root)
    if problems:
        raise ContainerError(f"invalid dataset {root}: " + "; ".join(problems))
    with open(os.path.join(root, "poses.json")) as f:
        views = json.load(f)["views"]
    with open(os.path.join(root, "meta.json")) as f:
        meta = json.load(f)
    cams = [CameraModel.from_dict(v) for v in views]
    images = [load_png(os.path.join(root, "images", f"{i:04d}.png")) for i in range(len(cams))]
    depths = labels = None
    if all(os.path.isfile(os.path.join(root, "depth", f"{i:04d}.fpt")) for i in range(len(cams))):
        depths = [read_tensor(os.path.join(root, "depth", f"{i:04d}.fpt")).astype(np.float64)
                  for i in range(len(cams))]
    if all(os.path.isfile(os.path.join(root, "semantic", f"{i:04d}.png")) for i in range(len(cams))):
        labels = [np.asarray(Image.open(os.path.join(root, "semantic", f"{i:04d}.png")).convert("RGB"))[..., 0]
                  .astype(np.int64) for i in range(len(cams))]
    extra = {k: v for k, v in meta.items() if k not in ("aabb_min", "aabb_max", "n_views", "H", "W")}
    return SceneDataset(images, cams, meta["aabb_min"], meta["aabb_max"], labels, depths, extra)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def psnr(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return PSNR_INF if mse == 0 else 10.0 * math.log10(1.0 / mse)


def reproject(depth_target, cam_target: CameraModel, cam_src: CameraModel):
    """Map target pixels into the source image.

    Returns ``(u, v, dist, front)`` as ``[H, W]`` arrays, where ``(u, v)``
    are continuous source pixel indices (pixel centres at integers) and
    ``dist`` is the distance from the source camera centre.
    """
    o, d = ray_bundle(cam_target)
    depth = np.asarray(depth_target, dtype=np.float64).reshape(-1)
    X = o + np.where(np.isfinite(depth), depth, 0)[:, None] * d
    pc = (X - cam_src.origin) @ cam_src.rotation
    z = pc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = cam_src.fx * pc[:, 0] / zs + cam_src.cx - 0.5
    v = cam_src.fy * pc[:, 1] / zs + cam_src.cy - 0.5
    dist = np.linalg.norm(X - cam_src.origin, axis=1)
    shp = (cam_target.H, cam_target.W)
    return u.reshape(shp), v.reshape(shp), dist.reshape(shp), front.reshape(shp)


def _valid_depth(depth, valid):
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    return depth, ok


def warp_image(I_src, depth_target, cam_target, cam_src, tau, depth_src, valid_target=None,
               valid_src=None):
    """Backward-warp ``I_src`` into the target view using depths.

    A target pixel is valid when its depth is valid, its projection lands
    inside the source image in front of the camera, every bilinear neighbour
    with non-negligible weight has a valid source depth, and the distance to
    the source camera agrees with the interpolated source depth within
    ``tau``.
    """
    if depth_target is None or depth_src is None:
        raise ValueError("warping needs target and source depths")
    I_src = np.asarray(I_src, dtype=np.float64)
    d_t, ok_t = _valid_depth(depth_target, valid_target)
    d_s, ok_s = _valid_depth(depth_src, valid_src)
    Hs, Ws = d_s.shape
    u, v, dist, front = reproject(np.where(ok_t, d_t, np.inf), cam_target, cam_src)
    # snap reprojection round-off so an identity warp samples pixels exactly
    u = np.where(np.abs(u - np.round(u)) < SNAP_EPS, np.round(u), u)
    v = np.where(np.abs(v - np.round(v)) < SNAP_EPS, np.round(v), v)
    inside = front & (u >= 0) & (u <= Ws - 1) & (v >= 0) & (v <= Hs - 1) & ok_t
    uc = np.clip(u, 0, Ws - 1)
    vc = np.clip(v, 0, Hs - 1)
    u0 = np.clip(np.floor(uc).astype(np.int64), 0, max(Ws - 2, 0))
    v0 = np.clip(np.floor(vc).astype(np.int64), 0, max(Hs - 2, 0))
    fu, fv = uc - u0, vc - v0
    u1 = np.minimum(u0 + 1, Ws - 1)
    v1 = np.minimum(v0 + 1, Hs - 1)
    corners = [(v0, u0, (1 - fv) * (1 - fu)), (v0, u1, (1 - fv) * fu), (v1, u0, fv * (1 - fu)), (v1, u1, fv * fu)]
    d_s0 = np.where(ok_s, d_s, 0.0)
    neigh_ok = np.ones_like(inside)
    dep = np.zeros(u.shape)
    out = np.zeros(u.shape + I_src.shape[2:])
    for vv, uu, w in corners:
        need = w > 1e-6
        neigh_ok &= ~need | ok_s[vv, uu]
        dep += w * d_s0[vv, uu]
        out += (w[..., None] if I_src.ndim == 3 else w) * I_src[vv, uu]
    mask = inside & neigh_ok & (np.abs(dist - dep) < tau)
    out[~mask] = 0.0
    return out, mask


def warp_error(I_d, I_d_prime, depth_d, depth_d_prime, cam_d, cam_d_prime, tau, valid_d=None,
               valid_d_prime=None):
    """Masked MSE between view ``d`` and view ``d'`` warped into ``d``.

    The mean runs over valid pixels only (and over color channels).
    """
    warped, mask = warp_image(I_d_prime, depth_d, cam_d, cam_d_prime, tau, depth_d_prime,
                              valid_d, valid_d_prime)
    if not mask.any():
        raise EmptyMaskError("no valid pixels after warping; warp error is undefined")
    diff = np.asarray(I_d, dtype=np.float64)[mask] - warped[mask]
    return float(np.mean(diff**2))
