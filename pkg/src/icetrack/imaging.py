"""Sub-image extraction, preprocessing, and template-matching likelihoods.

Image arrays are indexed ``[row, col]``; pixel coordinates are ``(u, v)``
with u along columns and v along rows (see geometry module). A matching
offset ``(du, dv)`` is the displacement of the tracked feature relative
to the anchor pixel of the test window: the feature currently sits at
parent-image pixel ``anchor + offset``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import median_filter

__all__ = [
    "SizeError",
    "SubImage",
    "LikelihoodSurface",
    "band_histograms",
    "match_histograms",
    "whitened_intensity",
    "extract_window",
    "preprocess",
    "match",
    "subpixel_peak",
    "evaluate_likelihood",
]


class SizeError(ValueError):
    """Reference sub-image does not fit strictly inside the test sub-image."""


@dataclass
class SubImage:
    """Preprocessed single-channel sub-image.

    ``anchor`` is the integer (u, v) pixel of the extraction center in the
    parent image (array index ``[size//2, size//2]`` of this window).
    ``low_information`` marks degenerate patches (fog, occlusion) whose
    matches carry no information.
    """

    pixels: np.ndarray
    anchor: np.ndarray
    low_information: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        self.anchor = np.asarray(self.anchor, dtype=int).reshape(2)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape  # (rows, cols)


def band_histograms(rgb) -> np.ndarray:
    """256-bin per-band histogram counts, shape (3, 256)."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) RGB array")
    bins = np.clip(np.floor(img.astype(float)), 0, 255).astype(np.int64)
    return np.stack([np.bincount(bins[..., b].ravel(), minlength=256)[:256]
                     for b in range(3)])


def match_histograms(rgb, reference_histogram) -> np.ndarray:
    """Map each band of ``rgb`` so its histogram matches the reference.

    Uses 256-bin cumulative-histogram (quantile) mapping per band; an
    image matched against its own histogram is returned unchanged.
    """
    img = np.asarray(rgb, dtype=float)
    ref = np.asarray(reference_histogram, dtype=float)
    if ref.shape != (3, 256):
        raise ValueError("reference_histogram must have shape (3, 256)")
    out = np.empty_like(img)
    bins = np.clip(np.floor(img), 0, 255).astype(np.int64)
    for b in range(3):
        src = bins[..., b].ravel()
        s_values, s_inverse, s_counts = np.unique(src, return_inverse=True, return_counts=True)
        s_quantiles = np.cumsum(s_counts) / src.size
        t_counts = ref[b]
        t_values = np.nonzero(t_counts)[0]
        if t_values.size == 0:
            out[..., b] = img[..., b]
            continue
        t_quantiles = np.cumsum(t_counts[t_values]) / t_counts.sum()
        mapped = np.interp(s_quantiles, t_quantiles, t_values.astype(float))
        out[..., b] = mapped[s_inverse].reshape(img.shape[:2])
    return out


def whitened_intensity(rgb, min_variance: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Project RGB onto its first principal component and Z-normalize.

    The component is computed from the patch's own RGB covariance; its
    sign is fixed so the projection correlates positively with overall
    brightness. Returns ``(intensity, degenerate)``: when every band is
    (nearly) uniform there is no meaningful component and a zero image
    with ``degenerate=True`` comes back.
    """
    img = np.asarray(rgb, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (h, w, 3) RGB array")
    flat = img.reshape(-1, 3)
    centered = flat - flat.mean(axis=0)
    cov = centered.T @ centered / flat.shape[0]
    if np.max(np.diag(cov)) < min_variance:
        return np.zeros(img.shape[:2]), True
    eigvals, eigvecs = np.linalg.eigh(cov)
    component = eigvecs[:, -1]
    if component.sum() < 0:
        component = -component
    intensity = centered @ component
    std = intensity.std()
    if std < np.sqrt(min_variance):
        return np.zeros(img.shape[:2]), True
    z = (intensity - intensity.mean()) / std
    return z.reshape(img.shape[:2]), False


def extract_window(image, center_uv, size) -> Optional[np.ndarray]:
    """Copy a (size x size) window centered at integer pixel (u, v).

    Returns None when the window is not fully inside the image. ``size``
    may be an int or (rows, cols); odd sizes center exactly on the pixel.
    """
    img = np.asarray(image)
    u, v = (int(round(c)) for c in np.asarray(center_uv, dtype=float))
    rows, cols = (size, size) if np.isscalar(size) else size
    r0 = v - rows // 2
    c0 = u - cols // 2
    if r0 < 0 or c0 < 0 or r0 + rows > img.shape[0] or c0 + cols > img.shape[1]:
        return None
    return img[r0:r0 + rows, c0:c0 + cols].copy()


def preprocess(rgb, anchor, reference_histogram=None, *,
               median_size: int = 5, min_variance: float = 1e-6) -> SubImage:
    """Full sub-image preprocessing chain.

    Steps: optional per-band histogram matching (test sub-images only,
    against the raw reference patch's histogram), projection onto the
    patch's first principal component with Z-normalization, then
    subtraction of a median-filtered copy (highpass). Degenerate patches
    are flagged ``low_information`` instead of raising.
    """
    img = np.asarray(rgb, dtype=float)
    if reference_histogram is not None:
        img = match_histograms(img, reference_histogram)
    z, degenerate = whitened_intensity(img, min_variance=min_variance)
    if degenerate:
        return SubImage(np.zeros(img.shape[:2]), anchor, low_information=True)
    high = z - median_filter(z, size=median_size)
    return SubImage(high, anchor, low_information=False)


@dataclass
class LikelihoodSurface:
    """Area-averaged SSD grid and the likelihood it induces.

    ``log_ssd[i, j]`` is the mean squared difference at offset
    ``offset_origin + (j, i)`` (u along columns, v along rows). The
    likelihood is exp(-log_ssd / (sigma_ell^2 + sigma_m^2)), computed
    lazily and unnormalized. ``anchor`` is the test window's extraction
    center in its parent image; ``low_information`` propagates from
    preprocessing.
    """

    log_ssd: np.ndarray
    offset_origin: np.ndarray
    sigma_ell: float
    sigma_m: float
    anchor: Optional[np.ndarray] = None
    low_information: bool = False
    _likelihood: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.log_ssd = np.asarray(self.log_ssd, dtype=float)
        if self.log_ssd.ndim != 2:
            raise ValueError("log_ssd must be 2-D")
        if np.any(self.log_ssd < 0):
            raise ValueError("log_ssd must be nonnegative")
        self.offset_origin = np.asarray(self.offset_origin, dtype=float).reshape(2)
        self.sigma_ell = float(self.sigma_ell)
        self.sigma_m = float(self.sigma_m)
        if self.anchor is not None:
            self.anchor = np.asarray(self.anchor, dtype=int).reshape(2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_ssd.shape

    def likelihood(self) -> np.ndarray:
        """Unnormalized likelihood grid (cached)."""
        if self._likelihood is None:
            denom = self.sigma_ell ** 2 + self.sigma_m ** 2
            self._likelihood = np.exp(-self.log_ssd / denom)
        return self._likelihood

    def boundary_floor(self) -> float:
        """Minimum likelihood on the boundary ring of the grid."""
        lik = self.likelihood()
        if min(lik.shape) <= 2:
            return float(lik.min())
        edge = min(lik[0, :].min(), lik[-1, :].min(), lik[:, 0].min(), lik[:, -1].min())
        return float(edge)

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """(du, dv) coordinate axes of the grid."""
        h, w = self.log_ssd.shape
        du = self.offset_origin[0] + np.arange(w)
        dv = self.offset_origin[1] + np.arange(h)
        return du, dv

    def evaluate(self, offsets) -> np.ndarray:
        """Likelihood at continuous offsets (see evaluate_likelihood)."""
        return evaluate_likelihood(self, offsets)


def match(reference: SubImage, test: SubImage,
          sigma_ell: float, sigma_m: float) -> LikelihoodSurface:
    """Area-averaged sum of squared differences over all full-overlap offsets.

    The reference must fit strictly inside the test window in both
    dimensions; the resulting grid has shape
    ``(m_t - m_r + 1, n_t - n_r + 1)``, covering every placement.
    """
    t = reference.pixels
    i = test.pixels
    mr, nr = t.shape
    mt, nt = i.shape
    if mt <= mr or nt <= nr:
        raise SizeError(f"test {i.shape} must be strictly larger than reference {t.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(i, (mr, nr))
    diff = windows - t
    ssd = np.einsum("ijkl,ijkl->ij", diff, diff) / (mr * nr)
    origin = np.array([-(nt // 2 - nr // 2), -(mt // 2 - mr // 2)], dtype=float)
    return LikelihoodSurface(
        log_ssd=ssd,
        offset_origin=origin,
        sigma_ell=sigma_ell,
        sigma_m=sigma_m,
        anchor=test.anchor,
        low_information=reference.low_information or test.low_information,
    )


def subpixel_peak(surface: LikelihoodSurface) -> tuple[np.ndarray, bool]:
    """Maximum-likelihood offset with sub-grid precision.

    Fits a quadratic to the 3x3 neighborhood of the discrete SSD minimum
    and returns the vertex as a continuous (du, dv) offset. When the
    discrete peak lies on the grid boundary (or the fit is not a proper
    minimum) the discrete offset is returned with the flag set.
    """
    ssd = surface.log_ssd
    h, w = ssd.shape
    i0, j0 = np.unravel_index(np.argmin(ssd), ssd.shape)
    peak = surface.offset_origin + np.array([j0, i0], dtype=float)
    if i0 == 0 or j0 == 0 or i0 == h - 1 or j0 == w - 1:
        return peak, True

    patch = ssd[i0 - 1:i0 + 2, j0 - 1:j0 + 2]
    dy, dx = np.mgrid[-1:2, -1:2]
    a = np.column_stack([
        np.ones(9), dx.ravel(), dy.ravel(),
        dx.ravel() ** 2, (dx * dy).ravel(), dy.ravel() ** 2,
    ])
    # distance-weighted fit: still exact for quadratics, but corner cells
    # cannot drag the vertex when the valley is narrow
    w = np.exp(-(dx.ravel() ** 2 + dy.ravel() ** 2) / 2.0)
    aw = a * w[:, None]
    coef = np.linalg.solve(aw.T @ a, aw.T @ patch.ravel())
    _, b, c, d, e, f = coef
    hess = np.array([[2 * d, e], [e, 2 * f]])
    # the vertex is a minimum of the SSD only if the Hessian is positive definite
    if np.linalg.det(hess) <= 0 or hess[0, 0] <= 0:
        return peak, True
    vert = np.linalg.solve(hess, -np.array([b, c]))
    if np.max(np.abs(vert)) > 1.5:
        return peak, True
    return peak + vert, False


def evaluate_likelihood(surface: LikelihoodSurface, offsets) -> np.ndarray:
    """Bilinear interpolation of the likelihood at continuous offsets.

    ``offsets`` has shape (..., 2) in (du, dv); values outside the grid
    return the surface's boundary floor. Scalar input gives a scalar.
    """
    pts = np.asarray(offsets, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    lik = surface.likelihood()
    h, w = lik.shape
    gx = pts[..., 0] - surface.offset_origin[0]
    gy = pts[..., 1] - surface.offset_origin[1]
    inside = (gx >= 0) & (gx <= w - 1) & (gy >= 0) & (gy <= h - 1)

    gxc = np.clip(np.nan_to_num(gx, nan=0.0), 0, w - 1)
    gyc = np.clip(np.nan_to_num(gy, nan=0.0), 0, h - 1)
    j0 = np.minimum(gxc.astype(int), w - 2) if w > 1 else np.zeros_like(gxc, dtype=int)
    i0 = np.minimum(gyc.astype(int), h - 2) if h > 1 else np.zeros_like(gyc, dtype=int)
    fx = gxc - j0
    fy = gyc - i0
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    val = (lik[i0, j0] * (1 - fx) * (1 - fy)
           + lik[i0, j1] * fx * (1 - fy)
           + lik[i1, j0] * (1 - fx) * fy
           + lik[i1, j1] * fx * fy)
    out = np.where(inside, val, surface.boundary_floor())
    return float(out[0]) if single else out.reshape(np.asarray(offsets).shape[:-1])
