"""Synthetic scenes with analytic ground truth.

Ray-cast rendering of textured planes and axis-aligned boxes: every pixel
gets an exact depth, normal and (per view pair) visibility flag, which is
what the whole test suite verifies against.  Three reference fixtures are
shipped: ``plane3`` (slanted textured plane, 3 views), ``steps5`` (boxes at
three depths with occlusions, 5 views) and ``lowtex`` (a texture-poor
region for completeness stress).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneError
from .geometry import CameraView, save_camera
from .mapio import GeometryMap, save_image, save_map


# --- textures -------------------------------------------------------------

def checker_texture(scale: float, lo: float = 0.3, hi: float = 0.8):
    def tex(u, v):
        cell = (np.floor(u / scale) + np.floor(v / scale)).astype(np.int64) & 1
        return np.where(cell == 0, lo, hi)
    return tex


def noise_texture(scale: float, seed: int, lo: float = 0.2, hi: float = 0.8, cells: int = 257):
    """Smooth value noise: seeded lattice with bilinear interpolation."""
    grid = np.random.default_rng(seed).random((cells, cells))

    def tex(u, v):
        gu = (u / scale) % (cells - 1)
        gv = (v / scale) % (cells - 1)
        u0 = np.floor(gu).astype(np.int64)
        v0 = np.floor(gv).astype(np.int64)
        fu = gu - u0
        fv = gv - v0
        val = (grid[v0, u0] * (1 - fu) * (1 - fv) + grid[v0, u0 + 1] * fu * (1 - fv)
               + grid[v0 + 1, u0] * (1 - fu) * fv + grid[v0 + 1, u0 + 1] * fu * fv)
        return lo + (hi - lo) * val
    return tex


def flat_texture(value: float = 0.5):
    def tex(u, v):
        return np.full(np.shape(u), value)
    return tex


def banded_texture(inner, outer, u_range, v_range):
    """``inner`` texture inside a (u, v) rectangle, ``outer`` elsewhere."""
    def tex(u, v):
        inside = ((u >= u_range[0]) & (u <= u_range[1])
                  & (v >= v_range[0]) & (v <= v_range[1]))
        return np.where(inside, inner(u, v), outer(u, v))
    return tex


# --- primitives -----------------------------------------------------------

@dataclass
class Plane:
    point: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    texture: object = field(default_factory=lambda: checker_texture(0.25))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        self.u_axis = np.asarray(self.u_axis, dtype=np.float64)
        self.v_axis = np.asarray(self.v_axis, dtype=np.float64)

    def intersect(self, origin, dirs):
        """(t, normal, albedo) arrays; t = +inf where missed."""
        den = dirs @ self.normal
        num = (self.point - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        t = np.where(np.abs(den) > 1e-15, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        X = origin + t[..., None] * dirs
        u = (X - self.point) @ self.u_axis
        v = (X - self.point) @ self.v_axis
        alb = self.texture(u, v)
        nrm = np.broadcast_to(self.normal, dirs.shape)
        return t, nrm, alb


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    texture: object = field(default_factory=lambda: checker_texture(0.25))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (self.lo - origin) / dirs
            t1 = (self.hi - origin) / dirs
        t0 = np.nan_to_num(t0, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
        t1 = np.nan_to_num(t1, nan=np.inf, posinf=np.inf, neginf=-np.inf)
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        t_enter = tmin.max(axis=-1)
        t_exit = tmax.min(axis=-1)
        hit = (t_exit >= t_enter) & (t_exit > 1e-9)
        t = np.where(hit & (t_enter > 1e-9), t_enter, np.inf)
        axis = tmin.argmax(axis=-1)
        sign = np.where(np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0, -1.0, 1.0)
        nrm = np.zeros(dirs.shape)
        np.put_along_axis(nrm, axis[..., None], sign[..., None], axis=-1)
        X = origin + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        # texture the two coordinates orthogonal to the face axis
        u = np.where(axis == 0, X[..., 1], X[..., 0])
        v = np.where(axis == 2, X[..., 1], X[..., 2])
        alb = self.texture(u, v)
        return t, nrm, alb


# --- scene ----------------------------------------------------------------

@dataclass
class SynthScene:
    primitives: list
    cameras: list
    noise_sigma: float = 0.0
    seed: int = 0
    name: str = "scene"

    @property
    def depth_range(self):
        """Conservative (min, max) ground-truth depth over all views."""
        lo, hi = np.inf, -np.inf
        for view in self.cameras:
            gt = render_view(self, view, noise=False)["gt"]
            d = gt.depth[gt.valid]
            if d.size:
                lo = min(lo, float(d.min()))
                hi = max(hi, float(d.max()))
        return 0.8 * lo, 1.25 * hi


def look_at_camera(eye, target, fov_deg, width, height, view_id, up=(0.0, -1.0, 0.0)):
    """Pinhole camera at eye looking at target (image y runs downward)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise SceneError("view direction parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    t = -R @ eye
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    K = np.array([[f, 0.0, (width - 1) / 2.0],
                  [0.0, f, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraView(K, R, t, width, height, view_id)


def render_view(scene: SynthScene, view: CameraView, noise: bool = True) -> dict:
    """Ray-cast one view: image, GT geometry map, hit points."""
    origin = view.center
    rays_cam = view.ray_grid()  # z = 1, so the ray scale is camera depth
    dirs = rays_cam @ view.rotation  # R^T applied row-wise

    best_t = np.full(rays_cam.shape[:2], np.inf)
    best_n = np.zeros(rays_cam.shape)
    best_a = np.zeros(rays_cam.shape[:2])
    for prim in scene.primitives:
        t, n, a = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_a = np.where(closer, a, best_a)

    valid = np.isfinite(best_t)
    if not np.any(valid):
        raise SceneError(f"view {view.view_id} sees no geometry")
    if np.any(best_t[valid] <= 0):
        raise SceneError(f"camera {view.view_id} is inside scene geometry")

    depth = np.where(valid, best_t, 0.0)
    n_cam = best_n @ view.rotation.T
    # orient normals toward the camera
    flip = np.einsum("hwk,hwk->hw", n_cam, rays_cam) > 0
    n_cam = np.where(flip[..., None], -n_cam, n_cam)

    image = best_a.copy()
    image[~valid] = 0.0
    if noise and scene.noise_sigma > 0:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=scene.seed, spawn_key=(int(view.view_id),)))
        image = image + rng.normal(0.0, scene.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)

    gt = GeometryMap(depth, n_cam, valid)
    points = origin + depth[..., None] * dirs
    return {"image": image, "gt": gt, "points": points}


def render(scene: SynthScene) -> dict:
    """Render every view; returns {view_id: render_view dict}."""
    return {v.view_id: render_view(scene, v) for v in scene.cameras}


def visibility_mask(scene_renders, ref_id, src_id, ref_view, src_view,
                    rel_tol=1e-3) -> np.ndarray:
    """Which reference pixels' GT points are seen (unoccluded) in src."""
    pts = scene_renders[ref_id]["points"]
    src_gt = scene_renders[src_id]["gt"]
    X = pts @ src_view.rotation.T + src_view.translation
    z = X[..., 2]
    ok = z > 0
    zsafe = np.where(ok, z, 1.0)
    uvw = X @ src_view.intrinsics.T
    u = uvw[..., 0] / zsafe
    v = uvw[..., 1] / zsafe
    ok &= (u >= 0) & (u <= src_view.width - 1) & (v >= 0) & (v <= src_view.height - 1)
    iu = np.clip(np.rint(u).astype(np.int64), 0, src_view.width - 1)
    iv = np.clip(np.rint(v).astype(np.int64), 0, src_view.height - 1)
    d_src = src_gt.depth[iv, iu]
    ok &= src_gt.valid[iv, iu]
    # occluded when something sits strictly in front of the projected point
    ok &= z <= d_src * (1 + rel_tol) + 1e-9
    ok &= scene_renders[ref_id]["gt"].valid
    return ok


# --- fixtures -------------------------------------------------------------

def plane3(width=192, height=144, noise_sigma=0.01, seed=7) -> SynthScene:
    """One slanted checkered plane seen by a 3-camera arc."""
    plane = Plane(point=(0, 0, 4.0), normal=(0.35, 0.15, -1.0),
                  u_axis=(1, 0, 0.35), v_axis=(0, 1, 0.15),
                  texture=checker_texture(0.45))
    cams = []
    for i, xoff in enumerate((-0.5, 0.0, 0.5)):
        cams.append(look_at_camera((xoff, 0.05 * i, 0.0), (0, 0, 4.0), 50.0,
                                   width, height, str(i)))
    return SynthScene([plane], cams, noise_sigma, seed, name="plane3")


def steps5(width=192, height=144, noise_sigma=0.01, seed=11) -> SynthScene:
    """Three box steps in front of a back wall; occlusions across 5 views."""
    wall = Plane(point=(0, 0, 6.0), normal=(0, 0, -1.0),
                 u_axis=(1, 0, 0), v_axis=(0, 1, 0),
                 texture=noise_texture(0.35, seed=101))
    boxes = [
        Box((-1.8, -1.2, 3.2), (-0.4, 1.2, 6.1), texture=checker_texture(0.4)),
        Box((-0.4, -1.2, 4.0), (0.6, 1.2, 6.1), texture=noise_texture(0.3, seed=102)),
        Box((0.6, -1.2, 4.8), (1.9, 1.2, 6.1), texture=checker_texture(0.3, lo=0.25, hi=0.7)),
    ]
    cams = []
    for i, xoff in enumerate((-0.8, -0.4, 0.0, 0.4, 0.8)):
        cams.append(look_at_camera((xoff, 0.0, 0.0), (0, 0, 4.8), 55.0,
                                   width, height, str(i)))
    return SynthScene([wall] + boxes, cams, noise_sigma, seed, name="steps5")


def lowtex(width=192, height=144, noise_sigma=0.01, seed=13) -> SynthScene:
    """Slanted plane with a flat-texture band: completeness stress case."""
    tex = banded_texture(flat_texture(0.55), checker_texture(0.4),
                         u_range=(-0.8, 0.8), v_range=(-0.6, 0.6))
    plane = Plane(point=(0, 0, 4.0), normal=(0.3, 0.0, -1.0),
                  u_axis=(1, 0, 0.3), v_axis=(0, 1, 0),
                  texture=tex)
    cams = []
    for i, xoff in enumerate((-0.5, 0.0, 0.5)):
        cams.append(look_at_camera((xoff, 0.0, 0.0), (0, 0, 4.0), 50.0,
                                   width, height, str(i)))
    return SynthScene([plane], cams, noise_sigma, seed, name="lowtex")


FIXTURES = {"plane3": plane3, "steps5": steps5, "lowtex": lowtex}


def scene_from_config(cfg: dict) -> SynthScene:
    """Build a scene from a parsed scene config (fixture name + overrides)."""
    name = cfg.get("fixture")
    if name not in FIXTURES:
        raise SceneError(f"unknown fixture {name!r}; available: {sorted(FIXTURES)}")
    kwargs = {}
    if "resolution" in cfg:
        kwargs["width"], kwargs["height"] = cfg["resolution"]
    for key in ("noise_sigma", "seed"):
        if key in cfg:
            kwargs[key] = cfg[key]
    return FIXTURES[name](**kwargs)


def emit_scene(scene: SynthScene, out_dir, stages: int = 3, engine_overrides=None) -> dict:
    """Render a scene to disk: images, cameras, GT maps and a reconstruction config."""
    os.makedirs(out_dir, exist_ok=True)
    renders = render(scene)
    dmin, dmax = scene.depth_range

    views = []
    for view in scene.cameras:
        vid = view.view_id
        img_path = os.path.join(out_dir, f"view_{vid}.png")
        cam_path = os.path.join(out_dir, f"view_{vid}.cam.txt")
        gt_path = os.path.join(out_dir, f"gt_{vid}.map")
        save_image(img_path, renders[vid]["image"])
        save_camera(cam_path, view)
        save_map(gt_path, renders[vid]["gt"])
        views.append({"id": vid, "image": f"view_{vid}.png",
                      "camera": f"view_{vid}.cam.txt", "gt": f"gt_{vid}.map"})

    config = {
        "name": scene.name,
        "views": views,
        "sources": {v["id"]: [o["id"] for o in views if o["id"] != v["id"]]
                    for v in views},
        "depth_min": dmin,
        "depth_max": dmax,
        "stages": stages,
        "seed": scene.seed,
    }
    if engine_overrides:
        config.update(engine_overrides)
    cfg_path = os.path.join(out_dir, "scene.json")
    with open(cfg_path, "w") as f:
        json.dump(config, f, indent=2)
    return {"config_path": cfg_path, "renders": renders, "config": config}
