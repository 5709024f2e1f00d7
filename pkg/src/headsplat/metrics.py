"""Image and distribution metrics: PSNR, SSIM, FID, KID, and the weighted
back-view perceptual score.

FID and KID operate on precomputed feature matrices; feature extraction is left
to an external network, which writes files readable by :func:`load_features`.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .image import Image

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2

CRITERIA = ("clarity", "structural_integrity", "texture_quality", "color_lighting_consistency", "overall_perception")
VIEW_WEIGHTS = {180: 0.5, 135: 0.25, 225: 0.25}


def _pixels(x) -> np.ndarray:
    return x.rgb if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; ``inf`` when identical."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


_WIN = _gaussian_window()
_HALF = SSIM_WINDOW // 2


def _filter_valid(x):
    """Separable Gaussian filter keeping only windows fully inside the image."""
    y = correlate1d(x, _WIN, axis=0, mode="constant")
    y = correlate1d(y, _WIN, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _filter_valid_adjoint(g, shape):
    full = np.zeros(shape[:2] + g.shape[2:])
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    # the window is symmetric, so the adjoint correlation uses the same taps
    y = correlate1d(full, _WIN, axis=1, mode="constant")
    return correlate1d(y, _WIN, axis=0, mode="constant")


def ssim_and_grad(a, b, need_grad=True):
    """Mean SSIM of ``a`` against ``b`` and its gradient with respect to ``a``."""
    a, b = _pixels(a), _pixels(b)
    _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side, got {a.shape[:2]}")
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    e_aa, e_bb, e_ab = _filter_valid(a * a), _filter_valid(b * b), _filter_valid(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = var_a + var_b + C2
    smap = num1 * num2 / (den1 * den2)
    value = float(np.mean(smap))
    if not need_grad:
        return value, None
    g = 1.0 / smap.size
    d_mu = g * (2 * mu_b * (num2 - num1) / (den1 * den2) - 2 * mu_a * smap * (1 / den1 - 1 / den2))
    d_eaa = g * (-smap / den2)
    d_eab = g * (2 * num1 / (den1 * den2))
    grad = (
        _filter_valid_adjoint(d_mu, a.shape)
        + 2 * a * _filter_valid_adjoint(d_eaa, a.shape)
        + b * _filter_valid_adjoint(d_eab, a.shape)
    )
    return value, grad


def ssim(a, b) -> float:
    """Mean local SSIM (Gaussian window, sigma 1.5), averaged over channels."""
    return ssim_and_grad(a, b, need_grad=False)[0]


# -- distribution metrics ---------------------------------------------------------

@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be an n x d matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else np.asarray(x, dtype=np.float64)


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(A, B) -> float:
    """Frechet distance between Gaussians fitted to two feature sets."""
    a, b = _feats(A), _feats(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("FID needs at least two samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    eps = 1e-10 * max(float(np.trace(inner)), 0.0)
    if np.any(vals < -eps):
        warnings.warn(f"clipping negative eigenvalues down to {vals.min():.3e} in FID matrix square root")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def _poly_kernel_sum(x, y, d, exclude_diag, block=2048):
    total = 0.0
    for i in range(0, len(x), block):
        k = (x[i:i + block] @ y.T / d + 1.0) ** 3
        if exclude_diag:
            rows = np.arange(k.shape[0])
            k[rows, rows + i] = 0.0
        total += float(k.sum())
    return total


def kid(A, B, block=2048) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel ``(x.y / d + 1)^3``."""
    a, b = _feats(A), _feats(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("KID needs at least two samples per set")
    d = a.shape[1]
    k_aa = _poly_kernel_sum(a, a, d, True, block)
    k_bb = _poly_kernel_sum(b, b, d, True, block)
    k_ab = _poly_kernel_sum(a, b, d, False, block)
    return k_aa / (m * (m - 1)) + k_bb / (n * (n - 1)) - 2.0 * k_ab / (m * n)


def load_features(path, source=None) -> FeatureSet:
    """Read a ``features n d`` header followed by ``n`` rows of ``d`` floats."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "features":
            raise ValueError(f"{path}: expected header 'features n d'")
        n, d = int(header[1]), int(header[2])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (n, d):
        raise ValueError(f"{path}: expected {n} x {d} values, got {data.shape}")
    return FeatureSet(data, source or str(path))


def save_features(fs: FeatureSet, path) -> None:
    n, d = fs.features.shape
    with open(path, "w") as fh:
        fh.write(f"features {n} {d}\n")
        for row in fs.features:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


# -- perceptual scoring -------------------------------------------------------------

@dataclass
class ScoreRecord:
    subject: str
    azimuth: int
    scores: dict

    def __post_init__(self):
        self.azimuth = int(self.azimuth)
        if self.azimuth not in VIEW_WEIGHTS:
            raise ValueError(f"azimuth must be one of {sorted(VIEW_WEIGHTS)}, got {self.azimuth}")
        missing = [c for c in CRITERIA if c not in self.scores]
        if missing:
            raise ValueError(f"record for {self.subject}@{self.azimuth} is missing {missing}")
        for c in CRITERIA:
            v = float(self.scores[c])
            if not 0.0 <= v <= 10.0:
                raise ValueError(f"{c} score {v} outside [0, 10]")

    def view_score(self) -> float:
        return float(np.mean([float(self.scores[c]) for c in CRITERIA]))


def perceptual_aggregate(records) -> tuple[dict, float]:
    """Per-criterion means over subjects and the overall weighted score.

    Each subject's criterion value is the view-weighted combination
    (0.5 at 180 degrees, 0.25 at 135 and 225); criterion rows average those over
    subjects and the overall score is the mean of the five criterion rows.
    """
    by_subject: dict[str, dict[int, ScoreRecord]] = {}
    for rec in records:
        by_subject.setdefault(rec.subject, {})[rec.azimuth] = rec
    if not by_subject:
        raise ValueError("no score records")
    per_criterion = {c: [] for c in CRITERIA}
    for subject in sorted(by_subject):
        views = by_subject[subject]
        for az in VIEW_WEIGHTS:
            if az not in views:
                raise ValueError(f"subject {subject!r} has no record at azimuth {az}")
        for c in CRITERIA:
            per_criterion[c].append(sum(w * float(views[az].scores[c]) for az, w in VIEW_WEIGHTS.items()))
    means = {c: float(np.mean(v)) for c, v in per_criterion.items()}
    return means, overall_score(means.values())


def overall_score(criterion_means) -> float:
    """Overall score from the five criterion means (each weighted 20%)."""
    vals = [float(v) for v in criterion_means]
    if len(vals) != len(CRITERIA):
        raise ValueError(f"expected {len(CRITERIA)} criterion means, got {len(vals)}")
    return float(np.mean(vals))


def weighted_view_score(s180: float, s135: float, s225: float) -> float:
    return VIEW_WEIGHTS[180] * s180 + VIEW_WEIGHTS[135] * s135 + VIEW_WEIGHTS[225] * s225


def load_score_records(path) -> list[ScoreRecord]:
    """JSON lines with ``subject``, ``azimuth`` and the five criterion fields."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append(ScoreRecord(str(row["subject"]), row["azimuth"], {c: row[c] for c in CRITERIA if c in row}))
    return out
