"""Perspective geometry: DLT homography estimation, robust consensus
fitting, and image/point warping.

Homographies are 3x3 float arrays normalized so that H[2, 2] == 1.  The
pipeline convention is that the alignment homography maps generated-image
coordinates to frame coordinates.
"""

from dataclasses import dataclass

import numpy as np

from .imgops import validate_image


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a homography."""


class NoConsensusError(RuntimeError):
    """Robust fitting found no model with enough inliers."""


@dataclass(frozen=True)
class RobustFitConfig:
    """Consensus-fit parameters. The defaults suit landmark alignment."""

    iterations: int = 500
    inlier_threshold: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.inlier_threshold <= 0:
            raise ValueError(
                f"inlier threshold must be positive, got {self.inlier_threshold}"
            )


def _as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain non-finite coordinates")
    return arr


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center points at the origin and scale mean distance to sqrt(2)."""
    center = pts.mean(axis=0)
    dist = np.sqrt(((pts - center) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateGeometryError("all points coincide")
    scale = np.sqrt(2.0) / dist
    T = np.array(
        [
            [scale, 0.0, -scale * center[0]],
            [0.0, scale, -scale * center[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return (pts - center) * scale, T


def normalize_homography(H: np.ndarray) -> np.ndarray:
    """Scale so H[2, 2] == 1 and check invertibility."""
    H = np.asarray(H, dtype=float)
    if H.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {H.shape}")
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateGeometryError("homography has (2, 2) entry near zero")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        raise DegenerateGeometryError("homography is not invertible")
    return H


def estimate_homography_dlt(src, dst) -> np.ndarray:
    """Least-squares homography mapping src points onto dst points.

    Hartley-normalizes both sets, solves the stacked 2n x 9 system through
    the 9x9 normal equations (smallest eigenvector), then denormalizes.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != dst.shape:
        raise ValueError(f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")

    src_n, T_src = _hartley_normalize(src)
    dst_n, T_dst = _hartley_normalize(dst)

    x, y = src_n[:, 0], src_n[:, 1]
    u, v = dst_n[:, 0], dst_n[:, 1]
    zeros = np.zeros(n)
    ones = np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    A[1::2] = np.column_stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v])

    M = A.T @ A
    eigvals, eigvecs = np.linalg.eigh(M)
    if eigvals[1] <= 1e-10 * max(eigvals[-1], 1e-8):
        raise DegenerateGeometryError(
            "degenerate point configuration (rank-deficient system)"
        )
    h = eigvecs[:, 0]
    H_norm = h.reshape(3, 3)
    H = np.linalg.inv(T_dst) @ H_norm @ T_src
    return normalize_homography(H)


def apply_homography(points, H: np.ndarray) -> np.ndarray:
    """Apply H with perspective division. Accepts (2,) or (n, 2) arrays."""
    H = np.asarray(H, dtype=float)
    single = np.asarray(points).ndim == 1
    pts = _as_points(np.atleast_2d(points))
    hom = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateGeometryError("point maps to infinity (zero homogeneous w)")
    out = hom[:, :2] / w[:, None]
    return out[0] if single else out


def reprojection_errors(H: np.ndarray, src, dst) -> np.ndarray:
    """Euclidean distance between H(src) and dst, per correspondence."""
    proj = apply_homography(src, H)
    return np.sqrt(((proj - _as_points(dst)) ** 2).sum(axis=1))


def robust_homography(src, dst, cfg: RobustFitConfig) -> tuple[np.ndarray, np.ndarray]:
    """Consensus fit: best minimal-sample model, refit on its inliers.

    Deterministic given cfg.seed.  Candidate models are ranked by inlier
    count, ties broken by lower total inlier reprojection error.  Returns
    the refit homography and the sorted inlier indices.
    """
    src = _as_points(src)
    dst = _as_points(dst)
    if src.shape != dst.shape:
        raise ValueError(f"point counts differ: {src.shape[0]} vs {dst.shape[0]}")
    n = src.shape[0]
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    best_count = 0
    best_err = np.inf
    best_inliers = None
    for _ in range(cfg.iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            H = estimate_homography_dlt(src[idx], dst[idx])
        except DegenerateGeometryError:
            continue
        err = reprojection_errors(H, src, dst)
        inliers = err <= cfg.inlier_threshold
        count = int(inliers.sum())
        if count < 4:
            continue
        total = float(err[inliers].sum())
        if count > best_count or (count == best_count and total < best_err):
            best_count = count
            best_err = total
            best_inliers = inliers
    if best_inliers is None:
        raise NoConsensusError(
            f"no model with >= 4 inliers within {cfg.inlier_threshold} px "
            f"after {cfg.iterations} iterations"
        )
    idx = np.flatnonzero(best_inliers)
    H = estimate_homography_dlt(src[idx], dst[idx])
    return H, idx


def warp_image(
    img: np.ndarray, H: np.ndarray, out_w: int, out_h: int, fill: float = 0.0
) -> np.ndarray:
    """Warp by H with inverse mapping and bilinear sampling.

    Every output pixel (x, y) is pulled from H^-1 (x, y); samples falling
    outside the source take the fill value.
    """
    validate_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    H = normalize_homography(H)
    Hinv = np.linalg.inv(H)

    h, w = img.shape[:2]
    xs, ys = np.meshgrid(np.arange(out_w, dtype=float), np.arange(out_h, dtype=float))
    denom = Hinv[2, 0] * xs + Hinv[2, 1] * ys + Hinv[2, 2]
    ok = np.abs(denom) > 1e-12
    denom_safe = np.where(ok, denom, 1.0)
    sx = (Hinv[0, 0] * xs + Hinv[0, 1] * ys + Hinv[0, 2]) / denom_safe
    sy = (Hinv[1, 0] * xs + Hinv[1, 1] * ys + Hinv[1, 2]) / denom_safe
    valid = ok & (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)

    x0 = np.clip(np.floor(sx).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(sy).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(sx - x0, 0.0, 1.0)
    fy = np.clip(sy - y0, 0.0, 1.0)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    sampled = top * (1.0 - fy) + bot * fy

    out = np.full((out_h, out_w) + img.shape[2:], float(fill))
    mask = valid if img.ndim == 2 else valid[..., None]
    np.copyto(out, sampled, where=mask)
    return np.clip(out, 0.0, 1.0)
