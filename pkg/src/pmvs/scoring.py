"""Photometric and geometric log-disbelief scoring.

The photometric score of a candidate plane is a supporting-pixel-weighted
group-wise correlation, mapped to [0, S_max] where 0 is a perfect match.
Geometric consistency adds the (capped) symmetric reprojection error
against each visible source view's stored geometry.
"""

import numpy as np

from .errors import SupportUnavailable
from .geometry import CameraView, PlaneHypothesis, relative_pose, unproject
from .mapio import CENTER_INDEX, SUPPORT_OFFSETS, CoplanarityMap, GeometryMap

S_MAX_DEFAULT = 12.0
G_MAX_DEFAULT = 3.0


def groupwise_correlation(ref_feat, src_feat, groups: int) -> np.ndarray:
    """Per-group normalized dot product of two feature vectors, in [-1, 1].

    Zero-norm groups correlate to 0 (flat-feature convention).  Works on
    trailing-channel arrays of any leading shape.
    """
    a = np.asarray(ref_feat, dtype=np.float64)
    b = np.asarray(src_feat, dtype=np.float64)
    c = a.shape[-1]
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    a = a.reshape(a.shape[:-1] + (groups, c // groups))
    b = b.reshape(b.shape[:-1] + (groups, c // groups))
    dot = np.einsum("...k,...k->...", a, b)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    return corr


def bilinear_sample(feat: np.ndarray, x, y):
    """Bilinear interpolation of (H, W, C) features at float coords.

    Returns (values, inside) where inside marks samples with full 4-tap
    support within the image.
    """
    h, w = feat.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    f00 = feat[y0, x0]
    f01 = feat[y0, x1]
    f10 = feat[y1, x0]
    f11 = feat[y1, x1]
    wx = fx[..., None]
    wy = fy[..., None]
    val = (f00 * (1 - wx) * (1 - wy) + f01 * wx * (1 - wy)
           + f10 * (1 - wx) * wy + f11 * wx * wy)
    return val, inside


def photometric_disbelief(corrs, view_weights=None, s_max=S_MAX_DEFAULT) -> float:
    """Map correlations to log-disbelief: S = s_max * (1 - mean corr) / 2.

    ``corrs`` is a list with one G-vector (or None for an unavailable view)
    per view; entries are averaged over views with renormalized weights.
    Mean correlation 1 maps to 0, -1 to s_max, 0 to s_max / 2.  No visible
    view means complete disagreement: s_max.
    """
    if isinstance(corrs, np.ndarray) and corrs.ndim == 1:
        corrs = [corrs]
    elif isinstance(corrs, (list, tuple)) and corrs and all(
            isinstance(c, (int, float, np.floating)) for c in corrs):
        corrs = [np.asarray(corrs, dtype=np.float64)]
    if view_weights is None:
        view_weights = [1.0] * len(corrs)
    num = 0.0
    den = 0.0
    for corr, v in zip(corrs, view_weights):
        if corr is None or v <= 0:
            continue
        num += v * s_max * (1.0 - float(np.mean(corr))) / 2.0
        den += v
    if den == 0:
        return float(s_max)
    return num / den


def geometric_score(s_pho: float, errors, visibilities, g_max=G_MAX_DEFAULT) -> float:
    """S_geo = sum_i v_i * (S_pho + min(E_i, g_max)).

    ``errors`` may contain np.inf for out-of-view reprojections; the cap
    makes those contribute exactly g_max.
    """
    total = 0.0
    for e, v in zip(errors, visibilities):
        total += v * (s_pho + min(float(e), g_max))
    return total


def aggregate_support(p, hyp: PlaneHypothesis, ref: CameraView, src: CameraView,
                      ref_feat: np.ndarray, src_feat: np.ndarray,
                      weights, support_set=None, groups: int = 1) -> np.ndarray:
    """Coplanarity-weighted group-wise correlation aggregated over support.

    ``weights`` is the 9-vector of supporting-pixel weights at p; the active
    subset (support_set, offset indices into 0..8) is renormalized so sampled
    and full aggregations stay comparable.  Source features are sampled
    bilinearly at the plane-warped positions.
    """
    p = np.asarray(p, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if support_set is None:
        support_set = list(range(9))
    support_set = list(support_set)
    if not support_set:
        raise ValueError("support set must be non-empty")

    R, t = relative_pose(ref, src)
    r_p = ref.ray(p)
    c = hyp.depth * float(hyp.normal @ r_p)  # plane offset n . X

    acc = None
    wtot = 0.0
    h, w = ref_feat.shape[:2]
    for k in support_set:
        off = SUPPORT_OFFSETS[k]
        q = p + off
        qx, qy = int(round(q[0])), int(round(q[1]))
        if not (0 <= qx < w and 0 <= qy < h):
            continue
        r_q = ref.ray(q)
        denom = float(hyp.normal @ r_q)
        if abs(denom) < 1e-12:
            continue
        lam = c / denom
        if lam <= 0:
            continue
        X_src = R @ (lam * r_q) + t
        if X_src[2] <= 0:
            continue
        uv = (src.intrinsics @ X_src)
        uv = uv[:2] / uv[2]
        val, inside = bilinear_sample(src_feat, uv[0], uv[1])
        if not bool(inside):
            continue
        corr = groupwise_correlation(ref_feat[qy, qx], val, groups)
        if acc is None:
            acc = weights[k] * corr
        else:
            acc = acc + weights[k] * corr
        wtot += weights[k]
    if acc is None or wtot <= 0:
        raise SupportUnavailable(f"no usable supporting pixel at {p}")
    return acc / wtot


def bilateral_weights(image: np.ndarray, p, sigma_color: float = 0.1,
                      sigma_dist: float = 3.0) -> np.ndarray:
    """Bilateral 9-vector: exp(-dc^2/2sc^2) * exp(-dd^2/2sd^2), center 1.

    Out-of-bounds supporting pixels get weight 0.
    """
    h, w = image.shape[:2]
    px, py = int(p[0]), int(p[1])
    center = image[py, px]
    out = np.zeros(9)
    for k, (dx, dy) in enumerate(SUPPORT_OFFSETS):
        qx, qy = px + dx, py + dy
        if not (0 <= qx < w and 0 <= qy < h):
            continue
        dc = float(image[qy, qx] - center)
        dd2 = float(dx * dx + dy * dy)
        out[k] = np.exp(-dc * dc / (2 * sigma_color ** 2)) * np.exp(-dd2 / (2 * sigma_dist ** 2))
    out[CENTER_INDEX] = 1.0 if 0 <= px < w and 0 <= py < h else 0.0
    return out


def gt_coplanarity(p, gt: GeometryMap, view: CameraView, tau: float = 0.01) -> np.ndarray:
    """Binary coplanarity from ground truth: point-to-plane test on neighbors.

    Weight 1 iff |n(p) . (X(q) - X(p))| / depth(p) < tau (strict); invalid or
    out-of-bounds neighbors get 0.
    """
    h, w = gt.shape
    px, py = int(p[0]), int(p[1])
    if not gt.valid[py, px]:
        raise ValueError(f"ground truth invalid at {p}")
    hyp_p = PlaneHypothesis(float(gt.depth[py, px]), gt.normal[py, px] / np.linalg.norm(gt.normal[py, px]))
    X_p = unproject(view, (px, py), hyp_p)
    n_world = view.rotation.T @ hyp_p.normal
    out = np.zeros(9)
    for k, (dx, dy) in enumerate(SUPPORT_OFFSETS):
        qx, qy = px + dx, py + dy
        if not (0 <= qx < w and 0 <= qy < h) or not gt.valid[qy, qx]:
            continue
        nq = gt.normal[qy, qx]
        hyp_q = PlaneHypothesis(float(gt.depth[qy, qx]), nq / np.linalg.norm(nq))
        X_q = unproject(view, (qx, qy), hyp_q)
        if abs(float(n_world @ (X_q - X_p))) / hyp_p.depth < tau:
            out[k] = 1.0
    return out


# --- whole-image weight providers ----------------------------------------

class WeightProvider:
    """Produces a CoplanarityMap of supporting-pixel weights for one view."""

    def coplanarity_map(self, **ctx) -> CoplanarityMap:
        raise NotImplementedError


class UniformWeights(WeightProvider):
    """All supporting pixels weighted equally (out-of-bounds zeroed)."""

    def coplanarity_map(self, *, shape, **ctx) -> CoplanarityMap:
        h, w = shape
        out = np.ones((h, w, 9), dtype=np.float32)
        _zero_out_of_bounds(out)
        return CoplanarityMap(out)


class BilateralWeights(WeightProvider):
    """Color/position product weights; the classic coplanarity proxy."""

    def __init__(self, sigma_color: float = 0.1, sigma_dist: float = 3.0):
        self.sigma_color = sigma_color
        self.sigma_dist = sigma_dist

    def coplanarity_map(self, *, image, **ctx) -> CoplanarityMap:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 3:
            image = image.mean(axis=2)
        h, w = image.shape
        out = np.zeros((h, w, 9), dtype=np.float64)
        pad = np.pad(image, 3, mode="edge")
        for k, (dx, dy) in enumerate(SUPPORT_OFFSETS):
            shifted = pad[3 + dy: 3 + dy + h, 3 + dx: 3 + dx + w]
            dc = shifted - image
            dd2 = float(dx * dx + dy * dy)
            out[..., k] = (np.exp(-dc * dc / (2 * self.sigma_color ** 2))
                           * np.exp(-dd2 / (2 * self.sigma_dist ** 2)))
        out[..., CENTER_INDEX] = 1.0
        _zero_out_of_bounds(out)
        return CoplanarityMap(out.astype(np.float32))


class GroundTruthWeights(WeightProvider):
    """Binary coplanarity derived from a ground-truth geometry map."""

    def __init__(self, gt: GeometryMap, view: CameraView, tau: float = 0.01):
        self.gt = gt
        self.view = view
        self.tau = tau

    def coplanarity_map(self, **ctx) -> CoplanarityMap:
        gt, view = self.gt, self.view
        h, w = gt.shape
        rays = view.ray_grid()
        depth = gt.depth.astype(np.float64)
        normal = gt.normal.astype(np.float64)
        X = depth[..., None] * rays  # camera frame; plane test is rigid-invariant
        out = np.zeros((h, w, 9), dtype=np.float64)
        for k, (dx, dy) in enumerate(SUPPORT_OFFSETS):
            Xq = _shift2d(X, dx, dy)
            vq = _shift2d(gt.valid.astype(np.float64), dx, dy) > 0.5
            resid = np.abs(np.einsum("hwk,hwk->hw", normal, Xq - X)) / depth
            out[..., k] = ((resid < self.tau) & vq & gt.valid).astype(np.float64)
        out[..., CENTER_INDEX] = gt.valid.astype(np.float64)
        _zero_out_of_bounds(out)
        return CoplanarityMap(out.astype(np.float32))


class LoadedWeights(WeightProvider):
    """Coplanarity weights loaded from a PMVSMAP1 file."""

    def __init__(self, cmap: CoplanarityMap):
        self.cmap = cmap

    def coplanarity_map(self, **ctx) -> CoplanarityMap:
        return self.cmap


def _shift2d(arr, dx, dy):
    """Shift so output[y, x] = arr[y + dy, x + dx], edge padded."""
    pad = 3
    if arr.ndim == 2:
        p = np.pad(arr, pad, mode="edge")
        return p[pad + dy: pad + dy + arr.shape[0], pad + dx: pad + dx + arr.shape[1]]
    p = np.pad(arr, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    return p[pad + dy: pad + dy + arr.shape[0], pad + dx: pad + dx + arr.shape[1]]


def _zero_out_of_bounds(weights: np.ndarray):
    """Zero the weights of supporting pixels outside the image."""
    h, w = weights.shape[:2]
    for k, (dx, dy) in enumerate(SUPPORT_OFFSETS):
        if dy < 0:
            weights[:(-dy), :, k] = 0.0
        elif dy > 0:
            weights[-dy:, :, k] = 0.0
        if dx < 0:
            weights[:, :(-dx), k] = 0.0
        elif dx > 0:
            weights[:, -dx:, k] = 0.0


def make_weight_provider(spec: str, **params) -> WeightProvider:
    """Factory for the provider variants named in scene configs."""
    if spec == "uniform":
        return UniformWeights()
    if spec == "bilateral":
        return BilateralWeights(params.get("sigma_color", 0.1), params.get("sigma_dist", 3.0))
    if spec == "gt":
        return GroundTruthWeights(params["gt"], params["view"], params.get("tau", 0.01))
    if spec == "loaded":
        return LoadedWeights(params["cmap"])
    raise ValueError(f"unknown weight provider {spec!r}")
