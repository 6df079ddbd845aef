"""Correlation criteria, logistic score mapping, PSNR/SSIM and test-set reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, signal, special, stats

from .data import load_sample, read_image
from .errors import ImageError, ShapeError, UndefinedCorrelationError
from .model import Model, predict_image

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(x, y, min_len=3):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"correlation needs equal lengths, got {x.size} and {y.size}")
    if x.size < min_len:
        raise ShapeError(f"correlation needs at least {min_len} points, got {x.size}")
    return x, y


def plcc(x, y) -> float:
    """Pearson product-moment correlation."""
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined: an input has zero variance")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman rank correlation; tied values share their average rank."""
    x, y = _pair(x, y)
    return plcc(stats.rankdata(x, method="average"), stats.rankdata(y, method="average"))


# ---------------------------------------------------------------------------
# four-parameter logistic mapping
# ---------------------------------------------------------------------------

def logistic(s, beta) -> np.ndarray:
    """``b2 + (b1 - b2) / (1 + exp(-(s - b3) / |b4|))``."""
    b1, b2, b3, b4 = beta
    scale = max(abs(b4), 1e-300)
    return b2 + (b1 - b2) * special.expit((np.asarray(s, dtype=np.float64) - b3) / scale)


def _sse(beta, s, q):
    r = logistic(s, beta) - q
    return float(r @ r)


def _refit_amplitudes(beta, s, q):
    """Least-squares optimal b1, b2 for fixed b3, b4 (the model is affine in them)."""
    g = special.expit((s - beta[2]) / max(abs(beta[3]), 1e-300))
    a = np.column_stack([g, 1.0 - g])
    (b1, b2), *_ = np.linalg.lstsq(a, q, rcond=None)
    return np.array([b1, b2, beta[2], beta[3]])


def _nelder_mead(beta0, s, q, max_iter):
    res = optimize.minimize(
        _sse, beta0, args=(s, q), method="Nelder-Mead",
        options={"xatol": 1e-8, "fatol": np.inf, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    return np.asarray(res.x, dtype=np.float64)


def logistic_fit(scores, mos, max_iter: int = 10_000):
    """Fit the monotone logistic from ``scores`` to ``mos`` by simplex descent.

    Returns ``(beta, mapped)``.  Two starts are tried: the conventional one
    (b1=max mos, b2=min mos, b3=mean score, b4=std/4, with b1 and b2 swapped
    when scores and mos are negatively related) and a nearly linear one
    (very wide b4), so the fit never maps worse than an affine map would.
    Amplitudes are polished by linear least squares and the lower-SSE fit wins.
    """
    s, q = _pair(scores, mos, min_len=5)
    sd = float(s.std())
    if sd == 0.0:
        raise ValueError("logistic fit needs non-constant predicted scores")
    hi, lo = q.max(), q.min()
    if float((s - s.mean()) @ (q - q.mean())) < 0:
        hi, lo = lo, hi
    starts = [np.array([hi, lo, s.mean(), sd / 4.0])]
    wide = np.array([0.0, 0.0, s.mean(), 1e5 * sd])
    starts.append(_refit_amplitudes(wide, s, q))
    best, best_sse = None, np.inf
    for beta0 in starts:
        beta = _refit_amplitudes(_nelder_mead(beta0, s, q, max_iter), s, q)
        err = _sse(beta, s, q)
        if err < best_sse:
            best, best_sse = beta, err
    best[3] = abs(best[3])
    return best, logistic(s, best)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _images(d, o):
    d = np.asarray(d, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if d.shape != o.shape:
        raise ShapeError(f"images differ in size: {d.shape} vs {o.shape}")
    return d, o


def psnr(d, o) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; identical images give 100."""
    d, o = _images(d, o)
    mse = float(np.mean((d - o) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(d, o) -> np.ndarray:
    d, o = _images(d, o)
    if d.ndim != 2 or min(d.shape) < SSIM_WINDOW:
        raise ImageError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {d.shape}")
    win = gaussian_window()

    def filt(a):
        return signal.correlate2d(a, win, mode="valid")

    mu_d, mu_o = filt(d), filt(o)
    var_d = filt(d * d) - mu_d * mu_d
    var_o = filt(o * o) - mu_o * mu_o
    cov = filt(d * o) - mu_d * mu_o
    num = (2 * mu_d * mu_o + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_d * mu_d + mu_o * mu_o + SSIM_C1) * (var_d + var_o + SSIM_C2)
    return num / den


def ssim(d, o) -> float:
    """Mean structural similarity over the valid region, 11x11 Gaussian window."""
    return float(ssim_map(d, o).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    srcc: float
    plcc: float
    beta: list
    pairs: list = field(default_factory=list)
    paths: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"srcc": self.srcc, "plcc": self.plcc, "beta": list(self.beta),
                "pairs": [list(p) for p in self.pairs]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(float(d["srcc"]), float(d["plcc"]), [float(b) for b in d["beta"]],
                   [tuple(p) for p in d["pairs"]])


def report_from_scores(pred, mos, paths=()) -> EvalReport:
    """SRCC on raw predictions, PLCC after logistic mapping."""
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    beta, mapped = logistic_fit(pred, mos)
    return EvalReport(
        srcc=srcc(pred, mos),
        plcc=plcc(mapped, mos),
        beta=[float(b) for b in beta],
        pairs=[(float(p), float(m)) for p, m in zip(pred, mos)],
        paths=[str(p) for p in paths],
    )


def predict_samples(model: Model, manifest) -> list:
    out = []
    for s in manifest:
        try:
            loaded = load_sample(s)
        except ImageError as exc:
            raise ImageError(f"evaluation aborted at {s.dist_path}: {exc}") from exc
        out.append(predict_image(model, loaded.distorted, loaded.residual))
    return out


def evaluate(model: Model, manifest) -> EvalReport:
    """Predict every image of a test manifest and score against its labels."""
    pred = predict_samples(model, manifest)
    return report_from_scores(pred, [s.score for s in manifest], [s.dist_path for s in manifest])


METRICS = {"psnr": psnr, "ssim": ssim}


def baseline_report(manifest, metric: str) -> EvalReport:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    fn = METRICS[metric]
    values = [fn(read_image(s.dist_path), read_image(s.ref_path)) for s in manifest]
    return report_from_scores(values, [s.score for s in manifest], [s.dist_path for s in manifest])
