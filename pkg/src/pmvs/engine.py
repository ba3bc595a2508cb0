"""The PatchMatch iteration: view selection, propagation, scoring, selection.

Updates run red-black (checkerboard): within one phase only pixels of one
parity are written, and spatial candidates come from opposite-parity
neighbors at offsets {+-1, +-5}, so no pixel ever reads a value written in
the same phase.  All randomness derives from (seed, scale, iteration,
phase), which makes runs bit-reproducible and thread-count independent.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .geometry import CameraView, PlaneHypothesis, propagate_hypothesis, relative_pose
from .mapio import CENTER_INDEX, SUPPORT_OFFSETS, CoplanarityMap, GeometryMap
from .scoring import G_MAX_DEFAULT, S_MAX_DEFAULT, bilinear_sample

PROPAGATION_OFFSETS = [(-1, 0), (1, 0), (0, -1), (0, 1),
                       (-5, 0), (5, 0), (0, -5), (0, 5)]

DEFAULT_SCHEDULE = {3: 8, 2: 3, 1: 3}


@dataclass
class EngineConfig:
    depth_min: float = 0.1
    depth_max: float = 10.0
    schedule: dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    k_views: int = 3
    s_max: float = S_MAX_DEFAULT
    g_max: float = G_MAX_DEFAULT
    groups: int = 1
    depth_perturbation: float = 0.1     # relative, decays per iteration
    normal_perturbation_deg: float = 10.0
    perturbation_decay: float = 0.5
    k_cand: int = 12
    sampling_m: int | None = None       # None = full 9-offset support
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.depth_min < self.depth_max):
            raise ConfigError(f"bad depth range [{self.depth_min}, {self.depth_max}]")
        if self.sampling_m is not None and not (1 <= self.sampling_m <= 8):
            raise ConfigError(f"sampling_m must be in 1..8, got {self.sampling_m}")


@dataclass
class CandidateSet:
    """Per-pixel candidate hypotheses with provenance tags."""

    hypotheses: list          # of PlaneHypothesis
    provenance: list          # of str tags, same order

    def __post_init__(self):
        assert len(self.hypotheses) == len(self.provenance)

    def __len__(self):
        return len(self.hypotheses)


@dataclass
class EngineState:
    geometry: GeometryMap
    visibility: np.ndarray    # (H, W, N_src) float
    scores: np.ndarray        # (H, W) current selected score
    scale: int
    iteration: int = 0


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def random_facing_normals(rays: np.ndarray, rng) -> np.ndarray:
    """Uniform normals on the camera-facing hemisphere of each pixel ray."""
    n = rng.standard_normal(rays.shape)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    dots = np.einsum("...k,...k->...", n, rays)
    n[dots > 0] *= -1.0
    exact_zero = np.einsum("...k,...k->...", n, rays) == 0
    if np.any(exact_zero):
        fallback = -rays / np.linalg.norm(rays, axis=-1, keepdims=True)
        n[exact_zero] = fallback[exact_zero]
    return n


def initialize(view: CameraView, depth_min: float, depth_max: float, seed: int) -> GeometryMap:
    """Random init: uniform depths, hemisphere normals; deterministic in seed."""
    if not (0 < depth_min < depth_max):
        raise ConfigError(f"bad depth range [{depth_min}, {depth_max}]")
    rng = _rng(seed, 0xC0FFEE)
    h, w = view.height, view.width
    depth = rng.uniform(depth_min, depth_max, size=(h, w))
    normal = random_facing_normals(view.ray_grid(), rng)
    return GeometryMap(depth, normal, np.ones((h, w), dtype=bool))


# --- vectorized scoring context -------------------------------------------

class ScoringContext:
    """Immutable per-scale data shared by every iteration at that scale."""

    def __init__(self, ref: CameraView, srcs, ref_feat, src_feats,
                 weights: CoplanarityMap, config: EngineConfig, src_geometry=None):
        self.ref = ref
        self.srcs = list(srcs)
        self.ref_feat = np.asarray(ref_feat, dtype=np.float64)
        self.src_feats = [np.asarray(f, dtype=np.float64) for f in src_feats]
        self.weights9 = np.asarray(weights.weights, dtype=np.float64)
        self.config = config
        self.src_geometry = src_geometry  # list[GeometryMap] at this scale, or None
        h, w = ref.height, ref.width
        self.shape = (h, w)

        ys, xs = np.mgrid[0:h, 0:w]
        self.px = xs.astype(np.float64)
        self.py = ys.astype(np.float64)
        # rays for pixels p + off, off in {-3..3}^2, padded analytic grid
        pad = 5
        yy, xx = np.mgrid[-pad:h + pad, -pad:w + pad]
        coords = np.stack([xx, yy], axis=-1).astype(np.float64)
        self.rays_pad = ref.ray(coords)
        self.pad = pad
        self.rays = self.rays_pad[pad:pad + h, pad:pad + w]

        cpad = ((pad, pad), (pad, pad), (0, 0))
        self.ref_feat_pad = np.pad(self.ref_feat, cpad, mode="constant")
        inb = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
        inb[pad:pad + h, pad:pad + w] = True
        self.inbounds_pad = inb

        self.rel_poses = [relative_pose(ref, s) for s in self.srcs]
        # unit-normalized per-channel ref features, precomputed per offset slice
        self.n_src = len(self.srcs)
        if src_geometry is not None:
            self.src_rays = [s.ray_grid() for s in self.srcs]

    def _slot(self, dx, dy):
        """Padded slices for a constant support offset."""
        h, w = self.shape
        p = self.pad
        sl = (slice(p + dy, p + dy + h), slice(p + dx, p + dx + w))
        return self.rays_pad[sl], self.ref_feat_pad[sl], self.inbounds_pad[sl]

    # -- photometric ------------------------------------------------------

    def view_disbelief(self, depth, normal, view_index, sampled=None):
        """(H, W) photometric log-disbelief of a hypothesis field for one view.

        ``sampled`` is an optional (H, W, m) int array of non-center offset
        indices; the center is always included and weights are renormalized
        over the active set.
        """
        cfg = self.config
        R, t = self.rel_poses[view_index]
        src_feat = self.src_feats[view_index]
        K_s = self.srcs[view_index].intrinsics
        depth = np.asarray(depth, dtype=np.float64)
        normal = np.asarray(normal, dtype=np.float64)
        c = depth * np.einsum("hwk,hwk->hw", normal, self.rays)

        if sampled is None:
            slots = [(k, None) for k in range(9)]
        else:
            slots = [(CENTER_INDEX, None)] + [(None, sampled[..., j]) for j in range(sampled.shape[2])]

        acc = np.zeros(self.shape)
        wtot = np.zeros(self.shape)
        for k_const, k_field in slots:
            if k_field is None:
                dx, dy = SUPPORT_OFFSETS[k_const]
                r_q, refF, refOK = self._slot(dx, dy)
                wgt = self.weights9[..., k_const]
            else:
                r_q, refF, refOK, wgt = self._gather_slot(k_field)
            corr, ok = self._slot_corr(c, normal, r_q, refF, R, t, K_s, src_feat)
            ok &= refOK & (wgt > 0)
            acc += np.where(ok, wgt * corr, 0.0)
            wtot += np.where(ok, wgt, 0.0)
        with np.errstate(invalid="ignore"):
            corr_mean = np.where(wtot > 0, acc / np.where(wtot > 0, wtot, 1.0), -1.0)
        return np.where(wtot > 0, cfg.s_max * (1.0 - corr_mean) / 2.0, cfg.s_max)

    def _gather_slot(self, k_field):
        """Per-pixel offset slot: gather rays/features/weights at p + off[k]."""
        h, w = self.shape
        p = self.pad
        dx = SUPPORT_OFFSETS[k_field, 0]
        dy = SUPPORT_OFFSETS[k_field, 1]
        gy = (self.py.astype(np.int64) + dy) + p
        gx = (self.px.astype(np.int64) + dx) + p
        r_q = self.rays_pad[gy, gx]
        refF = self.ref_feat_pad[gy, gx]
        refOK = self.inbounds_pad[gy, gx]
        wgt = np.take_along_axis(self.weights9, k_field[..., None], axis=2)[..., 0]
        return r_q, refF, refOK, wgt

    def _slot_corr(self, c, normal, r_q, refF, R, t, K_s, src_feat):
        """Group-mean correlation for one support slot of every pixel."""
        denom = np.einsum("hwk,hwk->hw", normal, r_q)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = c / denom
        ok = np.isfinite(lam) & (lam > 0)
        lam = np.where(ok, lam, 1.0)
        X = lam[..., None] * r_q
        Xs = X @ R.T + t
        z = Xs[..., 2]
        ok &= z > 0
        zsafe = np.where(z > 0, z, 1.0)
        uvw = Xs @ K_s.T
        u = uvw[..., 0] / zsafe
        v = uvw[..., 1] / zsafe
        val, inside = bilinear_sample(src_feat, u, v)
        ok &= inside
        corr = _group_corr_mean(refF, val, self.config.groups)
        return corr, ok

    def photometric(self, depth, normal, visibility, sampled=None):
        """(H, W) view-weighted photometric disbelief S_pho."""
        cfg = self.config
        num = np.zeros(self.shape)
        den = np.zeros(self.shape)
        for i in range(self.n_src):
            vis = visibility[..., i]
            if not np.any(vis > 0):
                continue
            s_v = self.view_disbelief(depth, normal, i, sampled=sampled)
            num += vis * s_v
            den += vis
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), cfg.s_max)

    # -- geometric --------------------------------------------------------

    def reprojection_errors(self, depth, normal, view_index):
        """(H, W) symmetric-transfer error against one source view's geometry.

        Out-of-view warps and invalid source hypotheses come back as +inf;
        the caller's min(E, g_max) cap turns those into g_max.
        """
        src = self.srcs[view_index]
        geom = self.src_geometry[view_index]
        R, t = self.rel_poses[view_index]
        depth = np.asarray(depth, dtype=np.float64)
        normal = np.asarray(normal, dtype=np.float64)

        # forward warp of the pixel centers
        X = depth[..., None] * self.rays
        Xs = X @ R.T + t
        z = Xs[..., 2]
        ok = z > 0
        zsafe = np.where(ok, z, 1.0)
        uvw = Xs @ src.intrinsics.T
        u = uvw[..., 0] / zsafe
        v = uvw[..., 1] / zsafe
        ok &= (u >= 0) & (u <= src.width - 1) & (v >= 0) & (v <= src.height - 1)

        ix = np.clip(np.rint(u).astype(np.int64), 0, src.width - 1)
        iy = np.clip(np.rint(v).astype(np.int64), 0, src.height - 1)
        d_s = geom.depth[iy, ix].astype(np.float64)
        n_s = geom.normal[iy, ix].astype(np.float64)
        ok &= geom.valid[iy, ix]

        # backward map with the source view's stored plane at the nearest pixel
        r_int = self.src_rays[view_index][iy, ix]
        c_s = d_s * np.einsum("hwk,hwk->hw", n_s, r_int)
        Kinv = np.linalg.inv(src.intrinsics)
        ones = np.ones_like(u)
        r_cont = np.stack([u, v, ones], axis=-1) @ Kinv.T
        den = np.einsum("hwk,hwk->hw", n_s, r_cont)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = c_s / den
        ok &= np.isfinite(lam) & (lam > 0)
        lam = np.where(ok, lam, 1.0)
        X_src = lam[..., None] * r_cont
        X_ref = (X_src - t) @ R
        zr = X_ref[..., 2]
        ok &= zr > 0
        zr = np.where(ok, zr, 1.0)
        pb = X_ref @ self.ref.intrinsics.T
        ex = pb[..., 0] / zr - self.px
        ey = pb[..., 1] / zr - self.py
        err = np.hypot(ex, ey)
        return np.where(ok, err, np.inf)

    def score(self, depth, normal, visibility, sampled=None):
        """Selection score: S_pho, plus geometric terms when geometry is set."""
        s_pho = self.photometric(depth, normal, visibility, sampled=sampled)
        if self.src_geometry is None:
            return s_pho
        cfg = self.config
        total = np.zeros(self.shape)
        for i in range(self.n_src):
            e = np.minimum(self.reprojection_errors(depth, normal, i), cfg.g_max)
            total += visibility[..., i] * (s_pho + e)
        return total


def _group_corr_mean(a, b, groups):
    """Mean over groups of the per-group normalized dot product."""
    c = a.shape[-1]
    ga = a.reshape(a.shape[:-1] + (groups, c // groups))
    gb = b.reshape(b.shape[:-1] + (groups, c // groups))
    dot = np.einsum("...k,...k->...", ga, gb)
    na = np.linalg.norm(ga, axis=-1)
    nb = np.linalg.norm(gb, axis=-1)
    den = na * nb
    corr = np.where(den > 0, dot / np.where(den > 0, den, 1.0), 0.0)
    return corr.mean(axis=-1)


# --- view selection -------------------------------------------------------

def select_views(ctx: ScoringContext, geometry: GeometryMap, k: int) -> np.ndarray:
    """Binary visibility: 1 for the k best views per pixel by photometric score."""
    h, w = ctx.shape
    n = ctx.n_src
    if n <= k:
        return np.ones((h, w, n))
    depth = geometry.depth.astype(np.float64)
    normal = geometry.normal.astype(np.float64)
    scores = np.stack([ctx.view_disbelief(depth, normal, i) for i in range(n)], axis=-1)
    kth = np.partition(scores, k - 1, axis=-1)[..., k - 1: k]
    vis = (scores <= kth).astype(np.float64)
    # exact ties at the threshold could select more than k; trim deterministically
    excess = vis.sum(axis=-1) > k
    if np.any(excess):
        order = np.argsort(scores, axis=-1, kind="stable")
        ranked = np.zeros_like(vis)
        np.put_along_axis(ranked, order[..., :k], 1.0, axis=-1)
        vis = np.where(excess[..., None], ranked, vis)
    return vis


# --- support sampling -----------------------------------------------------

def sample_support(weights, m: int, rng) -> np.ndarray:
    """Sample m distinct non-center offsets proportional to their weights.

    Weighted sampling without replacement via Gumbel top-k, equivalent to
    drawing sequentially with renormalization.  Fewer than m positive
    weights falls back to uniform over the in-bounds offsets.  Accepts a
    9-vector or an (H, W, 9) field; returns (m,) or (H, W, m) offset
    indices (center index 4 never appears).
    """
    w9 = np.asarray(weights, dtype=np.float64)
    single = w9.ndim == 1
    if single:
        w9 = w9[None, None, :]
    noncenter = np.delete(np.arange(9), CENTER_INDEX)
    w = w9[..., noncenter]
    pos = (w > 0).sum(axis=-1)
    w = np.where((pos < m)[..., None], 1.0, w)
    g = np.full(w.shape, -np.inf)
    u = rng.random(w.shape)
    okw = w > 0
    g[okw] = np.log(w[okw]) - np.log(-np.log(u[okw]))
    top = np.argsort(-g, axis=-1, kind="stable")[..., :m]
    idx = noncenter[top]
    if single:
        return idx[0, 0]
    return idx


# --- candidate generation -------------------------------------------------

def propose_candidates(p, geometry: GeometryMap, view: CameraView, parity: int,
                       config: EngineConfig, iteration: int, rng) -> CandidateSet:
    """Scalar candidate set at one pixel (reference semantics for the engine).

    Spatial candidates come from the opposite-parity neighbors at offsets
    {+-1, +-5} per axis, re-intersected onto this pixel's ray; perturbation
    magnitudes shrink by the configured decay each iteration.
    """
    px, py = int(p[0]), int(p[1])
    h, w = geometry.shape
    hyps = []
    tags = []

    cur = PlaneHypothesis(float(geometry.depth[py, px]),
                          _unit(geometry.normal[py, px]))
    hyps.append(cur)
    tags.append("current")

    seen = {(round(cur.depth, 12), tuple(np.round(cur.normal, 12)))}
    for dx, dy in PROPAGATION_OFFSETS:
        qx, qy = px + dx, py + dy
        if not (0 <= qx < w and 0 <= qy < h) or not geometry.valid[qy, qx]:
            continue
        nb = PlaneHypothesis(float(geometry.depth[qy, qx]), _unit(geometry.normal[qy, qx]))
        try:
            cand = propagate_hypothesis((qx, qy), (px, py), nb, view)
        except Exception:
            continue
        key = (round(cand.depth, 12), tuple(np.round(cand.normal, 12)))
        if key in seen:
            continue
        seen.add(key)
        hyps.append(cand)
        tags.append("spatial-propagated")

    decay = config.perturbation_decay ** iteration
    ray = view.ray((px, py))

    u = rng.uniform(-config.depth_perturbation * decay, config.depth_perturbation * decay)
    d_pert = float(np.clip(cur.depth * (1 + u), config.depth_min, config.depth_max))
    hyps.append(PlaneHypothesis(d_pert, cur.normal))
    tags.append("depth-perturbed")

    angle = np.deg2rad(config.normal_perturbation_deg * decay) * rng.random()
    axis = rng.standard_normal(3)
    axis -= axis @ cur.normal * cur.normal
    nrm = np.linalg.norm(axis)
    if nrm > 1e-12 and angle > 0:
        axis /= nrm
        n_rot = (np.cos(angle) * cur.normal + np.sin(angle) * np.cross(axis, cur.normal))
        n_rot /= np.linalg.norm(n_rot)
        if n_rot @ ray < 0:
            hyps.append(PlaneHypothesis(cur.depth, n_rot))
            tags.append("normal-perturbed")

    d_rand = rng.uniform(config.depth_min, config.depth_max)
    n_rand = random_facing_normals(ray[None, None], rng)[0, 0]
    hyps.append(PlaneHypothesis(float(d_rand), n_rand))
    tags.append("random")

    if len(hyps) > config.k_cand:
        hyps, tags = hyps[: config.k_cand], tags[: config.k_cand]
    return CandidateSet(hyps, tags)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _candidate_fields(geometry: GeometryMap, ctx: ScoringContext,
                      config: EngineConfig, iteration: int, rng):
    """Vectorized candidate fields: (tag, depth, normal, valid) per candidate."""
    h, w = geometry.shape
    depth = geometry.depth.astype(np.float64)
    normal = geometry.normal.astype(np.float64)
    rays = ctx.rays
    out = [("current", depth, normal, geometry.valid.copy())]

    c_all = depth * np.einsum("hwk,hwk->hw", normal, rays)
    for dx, dy in PROPAGATION_OFFSETS:
        d_n = _shift(depth, dx, dy)
        n_n = _shift3(normal, dx, dy)
        v_n = _shift(geometry.valid.astype(np.float64), dx, dy) > 0.5
        c_n = _shift(c_all, dx, dy)
        den = np.einsum("hwk,hwk->hw", n_n, rays)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = c_n / den
        ok = v_n & np.isfinite(lam) & (lam > 0)
        lam = np.where(ok, lam, d_n)
        out.append(("spatial-propagated", lam, n_n, ok))

    decay = config.perturbation_decay ** iteration
    u = rng.uniform(-config.depth_perturbation * decay,
                    config.depth_perturbation * decay, size=(h, w))
    d_pert = np.clip(depth * (1 + u), config.depth_min, config.depth_max)
    out.append(("depth-perturbed", d_pert, normal, geometry.valid.copy()))

    max_angle = np.deg2rad(config.normal_perturbation_deg * decay)
    angle = rng.random((h, w)) * max_angle
    axis = rng.standard_normal((h, w, 3))
    axis -= np.einsum("hwk,hwk->hw", axis, normal)[..., None] * normal
    nrm = np.linalg.norm(axis, axis=-1, keepdims=True)
    axis = np.where(nrm > 1e-12, axis / np.where(nrm > 1e-12, nrm, 1.0), 0.0)
    n_rot = (np.cos(angle)[..., None] * normal
             + np.sin(angle)[..., None] * np.cross(axis, normal))
    nn = np.linalg.norm(n_rot, axis=-1, keepdims=True)
    n_rot = np.where(nn > 0, n_rot / np.where(nn > 0, nn, 1.0), normal)
    facing = np.einsum("hwk,hwk->hw", n_rot, rays) < 0
    n_rot = np.where(facing[..., None], n_rot, normal)
    out.append(("normal-perturbed", depth, n_rot, geometry.valid.copy()))

    d_rand = rng.uniform(config.depth_min, config.depth_max, size=(h, w))
    n_rand = random_facing_normals(rays, rng)
    out.append(("random", d_rand, n_rand, np.ones((h, w), dtype=bool)))

    return out[: config.k_cand]


def _shift(arr, dx, dy):
    """out[y, x] = arr[y + dy, x + dx]; out-of-range filled with edge values."""
    p = 5
    pad = np.pad(arr, p, mode="edge")
    return pad[p + dy: p + dy + arr.shape[0], p + dx: p + dx + arr.shape[1]]


def _shift3(arr, dx, dy):
    p = 5
    pad = np.pad(arr, ((p, p), (p, p), (0, 0)), mode="edge")
    return pad[p + dy: p + dy + arr.shape[0], p + dx: p + dx + arr.shape[1]]


# --- iteration ------------------------------------------------------------

def run_iteration(state: EngineState, ctx: ScoringContext) -> EngineState:
    """One full PatchMatch iteration (both checkerboard phases)."""
    cfg = ctx.config
    h, w = ctx.shape
    geometry = state.geometry.copy()
    t = state.iteration

    visibility = select_views(ctx, geometry, cfg.k_views)
    parity_grid = ((np.add.outer(np.arange(h), np.arange(w))) & 1)

    scores = np.asarray(state.scores, dtype=np.float64).copy()

    for phase in (0, 1):
        rng = _rng(cfg.seed, state.scale, t, phase)
        sampled = None
        if cfg.sampling_m is not None:
            sampled = sample_support(ctx.weights9, cfg.sampling_m, rng)

        fields = _candidate_fields(geometry, ctx, cfg, t, rng)
        active = parity_grid == phase

        best_score = ctx.score(geometry.depth.astype(np.float64),
                               geometry.normal.astype(np.float64),
                               visibility, sampled=sampled)
        best_score = np.where(geometry.valid, best_score, np.inf)
        best_depth = geometry.depth.astype(np.float64).copy()
        best_normal = geometry.normal.astype(np.float64).copy()
        best_valid = geometry.valid.copy()

        for tag, d, n, ok in fields[1:]:
            if not np.any(ok):
                continue
            s = ctx.score(d, n, visibility, sampled=sampled)
            s = np.where(ok, s, np.inf)
            better = s < best_score  # strict: ties keep the incumbent
            if not np.any(better):
                continue
            best_score = np.where(better, s, best_score)
            best_depth = np.where(better, d, best_depth)
            best_normal = np.where(better[..., None], n, best_normal)
            best_valid |= better

        upd = active & best_valid & np.isfinite(best_score)
        geometry.depth[upd] = best_depth[upd].astype(np.float32)
        geometry.normal[upd] = best_normal[upd].astype(np.float32)
        geometry.valid[upd] = True
        scores[upd] = best_score[upd]

    return EngineState(geometry, visibility, scores.astype(np.float64),
                       state.scale, t + 1)


def run_scale(state: EngineState, ctx: ScoringContext, n_iter: int) -> EngineState:
    """Run n_iter PatchMatch iterations at one scale."""
    for _ in range(n_iter):
        state = run_iteration(state, ctx)
    return state
