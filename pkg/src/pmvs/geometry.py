"""Camera models, plane-induced homographies and reprojection error.

Conventions: world-to-camera extrinsics (x_cam = R @ X + t), pixels from
K @ x_cam with z-division, pixel centers at integer coordinates.  A plane
hypothesis is a (depth, normal) pair where depth is measured along the
camera z axis at the pixel and the normal is a unit vector in camera
coordinates facing the camera (normal . ray < 0).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegeneratePlane

# A ray is degenerate w.r.t. a plane when the angle between them is below
# this (radians); below double-precision noise for image-scale geometry.
DEGENERACY_TOL = 1e-8


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera for one view: intrinsics K, extrinsics (R, t), size."""

    intrinsics: np.ndarray  # 3x3 upper-triangular, pixels
    rotation: np.ndarray    # 3x3 world->camera
    translation: np.ndarray  # 3-vector
    width: int
    height: int
    view_id: str = "0"

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=np.float64))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        self.validate()

    def validate(self):
        K, R = self.intrinsics, self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) >= 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError("rotation determinant is not +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ValueError("K must be upper-triangular")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def scaled(self, s: int) -> "CameraView":
        """Camera for pyramid level s: focal/principal divided by 2^s, dims floored."""
        if s == 0:
            return self
        f = float(2 ** s)
        K = self.intrinsics.copy()
        K[0, 0] /= f
        K[1, 1] /= f
        K[0, 1] /= f
        K[0, 2] /= f
        K[1, 2] /= f
        return CameraView(K, self.rotation, self.translation,
                          self.width // (2 ** s), self.height // (2 ** s), self.view_id)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def ray(self, p) -> np.ndarray:
        """Viewing ray of pixel p in camera coordinates, normalized to z = 1."""
        p = np.asarray(p, dtype=np.float64)
        K = self.intrinsics
        x = (p[..., 0] - K[0, 2] - K[0, 1] * (p[..., 1] - K[1, 2]) / K[1, 1]) / K[0, 0]
        y = (p[..., 1] - K[1, 2]) / K[1, 1]
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def ray_grid(self) -> np.ndarray:
        """(H, W, 3) viewing rays for every pixel, z = 1."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return self.ray(np.stack([xs, ys], axis=-1).astype(np.float64))

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return ((p[..., 0] >= 0) & (p[..., 0] <= self.width - 1)
                & (p[..., 1] >= 0) & (p[..., 1] <= self.height - 1))


@dataclass(frozen=True)
class PlaneHypothesis:
    """Per-pixel PatchMatch state: depth along the pixel ray plus unit normal."""

    depth: float
    normal: np.ndarray  # unit 3-vector, camera coordinates

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64).reshape(3))
        if not (self.depth > 0):
            raise ValueError("depth must be positive")
        if abs(np.linalg.norm(self.normal) - 1.0) >= 1e-7:
            raise ValueError("normal must be unit length")


@dataclass(frozen=True)
class Homography:
    """3x3 pixel map between two views induced by one plane hypothesis."""

    matrix: np.ndarray
    source_id: str
    target_id: str
    hypothesis: PlaneHypothesis = field(compare=False, default=None)

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        q = self.matrix @ np.array([p[0], p[1], 1.0])
        return q[:2] / q[2]


def relative_pose(ref: CameraView, src: CameraView):
    """(R, t) mapping ref-camera coordinates into src-camera coordinates."""
    R = src.rotation @ ref.rotation.T
    t = src.translation - R @ ref.translation
    return R, t


def plane_point_and_distance(view: CameraView, p, hyp: PlaneHypothesis):
    """3D point of p on the plane (camera frame) and plane-to-origin distance."""
    r = view.ray(p)
    cos = float(hyp.normal @ r) / np.linalg.norm(r)
    if abs(cos) < DEGENERACY_TOL:
        raise DegeneratePlane(f"ray nearly parallel to plane (cos={cos:.2e})")
    X = hyp.depth * r  # ray has z = 1, so depth along z is the ray scale
    dist = -float(hyp.normal @ X)
    if dist <= 0:
        raise DegeneratePlane("plane does not face the camera at this pixel")
    return X, dist


def plane_homography(ref: CameraView, src: CameraView, p, hyp: PlaneHypothesis) -> Homography:
    """Homography warping ref pixels to src for points on p's hypothesis plane."""
    X, dist = plane_point_and_distance(ref, p, hyp)
    R, t = relative_pose(ref, src)
    X_src = R @ X + t
    if X_src[2] <= 0:
        raise BehindCamera("plane point behind the source camera")
    H = src.intrinsics @ (R - np.outer(t, hyp.normal) / dist) @ np.linalg.inv(ref.intrinsics)
    return Homography(H, ref.view_id, src.view_id, hyp)


def unproject(view: CameraView, p, hyp: PlaneHypothesis) -> np.ndarray:
    """World point where p's viewing ray meets the hypothesis plane."""
    X = hyp.depth * view.ray(p)
    return view.rotation.T @ (X - view.translation)


def project(view: CameraView, X_world) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel, camera depth)."""
    X = view.rotation @ np.asarray(X_world, dtype=np.float64) + view.translation
    if X[2] <= 0:
        raise BehindCamera("point behind camera")
    q = view.intrinsics @ X
    return q[:2] / q[2], float(X[2])


def propagate_hypothesis(from_pixel, to_pixel, hyp: PlaneHypothesis, view: CameraView) -> PlaneHypothesis:
    """Re-intersect from_pixel's plane with to_pixel's ray; normal is kept."""
    X, _ = plane_point_and_distance(view, from_pixel, hyp)
    c = float(hyp.normal @ X)
    r2 = view.ray(to_pixel)
    denom = float(hyp.normal @ r2)
    if abs(denom) / np.linalg.norm(r2) < DEGENERACY_TOL:
        raise DegeneratePlane("neighbor ray parallel to plane")
    lam = c / denom
    if lam <= 0:
        raise DegeneratePlane("plane behind camera at neighbor pixel")
    return PlaneHypothesis(lam, hyp.normal)


def reprojection_error(ref: CameraView, src: CameraView, p, hyp_ref: PlaneHypothesis,
                       src_lookup) -> float:
    """Symmetric-transfer reprojection error in pixels.

    src_lookup(ix, iy) must return the source view's stored PlaneHypothesis at
    an integer pixel, raising InvalidNeighbor when masked.  The backward
    homography uses the source hypothesis at the nearest pixel to the forward
    warp (no interpolation of hypotheses).
    """
    from .errors import OutOfView

    p = np.asarray(p, dtype=np.float64)
    q = plane_homography(ref, src, p, hyp_ref).apply(p)
    if not bool(src.contains(q)):
        raise OutOfView(f"forward warp {q} outside source bounds")
    ix, iy = int(round(q[0])), int(round(q[1]))
    hyp_src = src_lookup(ix, iy)
    p_back = plane_homography(src, ref, q, hyp_src).apply(q)
    return float(np.linalg.norm(p_back - p))


# --- camera text format ---------------------------------------------------

def save_camera(path, view: CameraView):
    """Write the whitespace-separated camera text format (K / R / t / wh)."""
    with open(path, "w") as f:
        f.write("K\n")
        for row in view.intrinsics:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
        f.write("R\n")
        for row in view.rotation:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
        f.write("t\n")
        f.write(" ".join(repr(float(v)) for v in view.translation) + "\n")
        f.write("wh\n")
        f.write(f"{view.width} {view.height}\n")


def load_camera(path, view_id=None) -> CameraView:
    from .errors import FormatError

    with open(path) as f:
        tokens = f.read().split()
    try:
        def take_block(tag, n):
            if tokens.pop(0) != tag:
                raise FormatError(f"expected '{tag}' in camera file {path}")
            return [float(tokens.pop(0)) for _ in range(n)]

        K = np.array(take_block("K", 9)).reshape(3, 3)
        R = np.array(take_block("R", 9)).reshape(3, 3)
        t = np.array(take_block("t", 3))
        wh = take_block("wh", 2)
    except (IndexError, ValueError) as e:
        raise FormatError(f"truncated or malformed camera file {path}: {e}") from e
    if view_id is None:
        view_id = "0"
    return CameraView(K, R, t, int(wh[0]), int(wh[1]), view_id)
