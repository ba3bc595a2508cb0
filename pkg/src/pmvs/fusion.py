"""Depth/normal map fusion into a filtered oriented point cloud, plus
accuracy/completeness/F1 evaluation and the Gaussian geometry reward.

A reference pixel becomes a 3D point only when enough source views agree
with it on all three tests: relative depth, symmetric reprojection and
normal angle.  Matched source pixels are consumed (first reference wins)
to suppress duplicates.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, FusionInputError
from .geometry import CameraView
from .mapio import GeometryMap, median_upsample


@dataclass
class FusionThresholds:
    rel_depth: float = 0.01     # |d_pred - d_src| / d_src, strict
    reproj_px: float = 2.0      # symmetric reprojection error, strict
    normal_deg: float = 10.0    # normal angle difference, strict
    min_consistent: int = 2     # source views that must pass all three


@dataclass
class FusedCloud:
    positions: np.ndarray   # (N, 3) world
    normals: np.ndarray     # (N, 3) unit, world
    support: np.ndarray     # (N,) consistent source view count
    view_index: np.ndarray  # (N,) index of the emitting reference view

    def __len__(self):
        return len(self.positions)


@dataclass
class EvalReport:
    thresholds: list
    accuracy: dict          # threshold -> percent
    completeness: dict
    f1: dict
    empty: bool = False
    reward_mean: float | None = None
    reward_median: float | None = None

    def lines(self):
        out = []
        for tau in self.thresholds:
            out.append(f"tau={tau:g}  accuracy={self.accuracy[tau]:.2f}%  "
                       f"completeness={self.completeness[tau]:.2f}%  f1={self.f1[tau]:.2f}%")
        if self.reward_mean is not None:
            out.append(f"reward_mean={self.reward_mean:.6g}  reward_median={self.reward_median:.6g}")
        if self.empty:
            out.append("warning: empty cloud")
        return out

    def dump(self):
        kv = {}
        for tau in self.thresholds:
            kv[f"accuracy@{tau:g}"] = self.accuracy[tau]
            kv[f"completeness@{tau:g}"] = self.completeness[tau]
            kv[f"f1@{tau:g}"] = self.f1[tau]
        kv["empty"] = int(self.empty)
        return "\n".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}"
                         for k, v in kv.items())


def upsample_for_fusion(gmap: GeometryMap, scale: int, full_view: CameraView) -> GeometryMap:
    """Bring an engine-scale map to full resolution for fusion.

    Depth goes through nearest-neighbor upsampling with the mask-aware 5x5
    median; normals are copied nearest-neighbor.
    """
    if scale == 0:
        return gmap
    f = 2 ** scale
    th, tw = gmap.shape[0] * f, gmap.shape[1] * f
    depth = median_upsample(gmap.depth.astype(np.float64), (th, tw), gmap.valid)
    normal = np.repeat(np.repeat(gmap.normal, f, axis=0), f, axis=1)
    valid = np.repeat(np.repeat(gmap.valid, f, axis=0), f, axis=1) & np.isfinite(depth)
    depth = np.where(np.isfinite(depth), depth, 0.0)
    h, w = full_view.height, full_view.width
    if th < h or tw < w:
        pd = np.zeros((h, w))
        pn = np.zeros((h, w, 3))
        pv = np.zeros((h, w), dtype=bool)
        pd[:th, :tw] = depth
        pn[:th, :tw] = normal
        pv[:th, :tw] = valid
        depth, normal, valid = pd, pn, pv
    else:
        depth, normal, valid = depth[:h, :w], normal[:h, :w], valid[:h, :w]
    return GeometryMap(depth, normal, valid)


def fuse(views, geometry, thresholds: FusionThresholds = None) -> FusedCloud:
    """Fuse per-view full-resolution geometry maps into one oriented cloud.

    ``views`` and ``geometry`` are parallel lists; reference views are
    processed in order and matched source pixels are consumed so each
    surface point is emitted once.
    """
    if thresholds is None:
        thresholds = FusionThresholds()
    n = len(views)
    if n != len(geometry):
        raise FusionInputError("views and geometry lists differ in length")
    shape = geometry[0].shape
    for g, v in zip(geometry, views):
        if g.shape != shape or (v.height, v.width) != shape:
            raise FusionInputError(
                f"resolution mismatch: maps {g.shape} vs camera {(v.height, v.width)}")

    cos_tol = np.cos(np.deg2rad(thresholds.normal_deg))
    consumed = [np.zeros(shape, dtype=bool) for _ in range(n)]
    dirs_all = []
    centers = []
    for v in views:
        dirs_all.append(v.ray_grid() @ v.rotation)
        centers.append(v.center)

    positions, normals, supports, view_idx = [], [], [], []

    for r in range(n):
        ref, g_ref = views[r], geometry[r]
        active = g_ref.valid & ~consumed[r]
        if not np.any(active):
            continue
        depth = g_ref.depth.astype(np.float64)
        X = centers[r] + depth[..., None] * dirs_all[r]
        n_ref = g_ref.normal.astype(np.float64)
        nn = np.linalg.norm(n_ref, axis=-1, keepdims=True)
        n_ref = np.where(nn > 0, n_ref / np.where(nn > 0, nn, 1.0), n_ref)

        ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
        count = np.zeros(shape, dtype=np.int32)
        matches = []
        for s in range(n):
            if s == r:
                continue
            src, g_src = views[s], geometry[s]
            Xs = X @ src.rotation.T + src.translation
            z = Xs[..., 2]
            ok = active & (z > 0)
            zs = np.where(z > 0, z, 1.0)
            uvw = Xs @ src.intrinsics.T
            u = uvw[..., 0] / zs
            v = uvw[..., 1] / zs
            ok &= (u >= 0) & (u <= src.width - 1) & (v >= 0) & (v <= src.height - 1)
            iu = np.clip(np.rint(u).astype(np.int64), 0, src.width - 1)
            iv = np.clip(np.rint(v).astype(np.int64), 0, src.height - 1)
            ok &= g_src.valid[iv, iu]

            d_src = g_src.depth[iv, iu].astype(np.float64)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.abs(z - d_src) / np.where(d_src > 0, d_src, 1.0)
            ok &= d_src > 0
            ok &= rel < thresholds.rel_depth

            # symmetric transfer: src pixel's stored point back into ref
            X_src = centers[s] + d_src[..., None] * dirs_all[s][iv, iu]
            Xr = X_src @ ref.rotation.T + ref.translation
            zr = Xr[..., 2]
            ok &= zr > 0
            zrs = np.where(zr > 0, zr, 1.0)
            pb = Xr @ ref.intrinsics.T
            err = np.hypot(pb[..., 0] / zrs - xs, pb[..., 1] / zrs - ys)
            ok &= err < thresholds.reproj_px

            n_src_ref = (g_src.normal[iv, iu].astype(np.float64)
                         @ src.rotation @ ref.rotation.T)
            ns = np.linalg.norm(n_src_ref, axis=-1)
            cosang = np.einsum("hwk,hwk->hw", n_ref, n_src_ref) / np.where(ns > 0, ns, 1.0)
            ok &= ns > 0
            ok &= cosang > cos_tol  # strict: angle < threshold

            count += ok.astype(np.int32)
            matches.append((s, ok, iu, iv))

        emit = active & (count >= thresholds.min_consistent)
        if not np.any(emit):
            continue
        positions.append(X[emit])
        normals.append((n_ref @ ref.rotation)[emit])
        supports.append(count[emit])
        view_idx.append(np.full(int(emit.sum()), r, dtype=np.int32))
        for s, ok, iu, iv in matches:
            sel = emit & ok
            consumed[s][iv[sel], iu[sel]] = True

    if not positions:
        return FusedCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                          np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int32))
    return FusedCloud(np.concatenate(positions), np.concatenate(normals),
                      np.concatenate(supports), np.concatenate(view_idx))


def evaluate(cloud_points, gt_points, thresholds=(0.01, 0.05)) -> EvalReport:
    """ETH3D-style accuracy/completeness/F1 at each distance threshold.

    Accuracy: fraction of reconstructed points within tau of ground truth;
    completeness: fraction of GT points within tau of the reconstruction.
    """
    cloud = np.asarray(cloud_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    thresholds = list(thresholds)
    acc, comp, f1 = {}, {}, {}
    empty = len(cloud) == 0 or len(gt) == 0
    if empty:
        for tau in thresholds:
            acc[tau] = 0.0
            comp[tau] = 0.0
            f1[tau] = 0.0
        return EvalReport(thresholds, acc, comp, f1, empty=True)

    d_cloud = cKDTree(gt).query(cloud)[0]
    d_gt = cKDTree(cloud).query(gt)[0]
    for tau in thresholds:
        a = 100.0 * float(np.mean(d_cloud <= tau))
        c = 100.0 * float(np.mean(d_gt <= tau))
        acc[tau] = a
        comp[tau] = c
        f1[tau] = 2 * a * c / (a + c) if a + c > 0 else 0.0
    return EvalReport(thresholds, acc, comp, f1)


def geometry_reward(est: GeometryMap, gt: GeometryMap,
                    sigma_d: float, sigma_n: float) -> np.ndarray:
    """Product of Gaussian densities in depth error and normal angle error.

    Returns a per-pixel field; pixels invalid in either map are NaN.
    At zero error the value is the density peak 1 / (2 pi sigma_d sigma_n).
    """
    if sigma_d <= 0 or sigma_n <= 0:
        raise ConfigError("reward sigmas must be positive")
    if est.shape != gt.shape:
        raise ConfigError(f"map shapes differ: {est.shape} vs {gt.shape}")
    d_err = est.depth.astype(np.float64) - gt.depth.astype(np.float64)
    ne = est.normal.astype(np.float64)
    ng = gt.normal.astype(np.float64)
    dot = np.einsum("hwk,hwk->hw", ne, ng)
    norm = np.linalg.norm(ne, axis=-1) * np.linalg.norm(ng, axis=-1)
    cosang = np.clip(dot / np.where(norm > 0, norm, 1.0), -1.0, 1.0)
    theta = np.arccos(cosang)
    pdf_d = np.exp(-d_err ** 2 / (2 * sigma_d ** 2)) / (np.sqrt(2 * np.pi) * sigma_d)
    pdf_n = np.exp(-theta ** 2 / (2 * sigma_n ** 2)) / (np.sqrt(2 * np.pi) * sigma_n)
    reward = pdf_d * pdf_n
    reward[~(est.valid & gt.valid) | (norm <= 0)] = np.nan
    return reward


# --- PLY ------------------------------------------------------------------

def save_ply(path, cloud: FusedCloud):
    """Binary little-endian PLY: float32 position + normal, uint8 support."""
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar support\nend_header\n"
    )
    rec = np.empty(n, dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("support", "u1")])
    rec["xyz"] = cloud.positions.astype("<f4")
    rec["n"] = cloud.normals.astype("<f4")
    rec["support"] = np.clip(cloud.support, 0, 255).astype("u1")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def load_ply(path) -> FusedCloud:
    from .errors import FormatError

    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise FormatError(f"not a PLY file: {path}")
    header = blob[:end].decode("ascii", "replace")
    n = None
    for line in header.splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise FormatError(f"no vertex element in {path}")
    rec = np.frombuffer(blob[end + len(b"end_header\n"):],
                        dtype=[("xyz", "<f4", 3), ("n", "<f4", 3), ("support", "u1")],
                        count=n)
    return FusedCloud(rec["xyz"].astype(np.float64), rec["n"].astype(np.float64),
                      rec["support"].astype(np.int32),
                      np.zeros(n, dtype=np.int32))
