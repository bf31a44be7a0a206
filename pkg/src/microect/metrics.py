"""Image-quality metrics, batch evaluation reports and window stitching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

METRICS = ("mse", "ssim", "psnr", "cc", "iou")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(pred, target) -> float:
    a, b = _pair(pred, target)
    return float(np.mean((a - b) ** 2))


def psnr(pred, target, data_range: float = 1.0, cap_db: float = 100.0) -> float:
    err = mse(pred, target)
    if err < 1e-10:
        return cap_db
    return float(min(10.0 * np.log10(data_range ** 2 / err), cap_db))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def ssim(pred, target, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM with a separable Gaussian window and symmetric-reflection borders."""
    a, b = _pair(pred, target)
    w = gaussian_window(window, sigma)

    def blur(img):
        return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pearson_cc(pred, target) -> float:
    a, b = _pair(pred, target)
    # a constant image has zero variance even when its float mean is inexact
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    return float((da * db).sum() / (sa * sb))


def iou(pred, target, threshold: float = 0.5) -> float:
    a, b = _pair(pred, target)
    ma, mb = a >= threshold, b >= threshold
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(ma & mb) / union)


METRIC_FUNCS = {"mse": mse, "ssim": ssim, "psnr": psnr, "cc": pearson_cc, "iou": iou}


@dataclass
class MetricsReport:
    predictor: str
    per_sample: dict = field(default_factory=lambda: {k: [] for k in METRICS})

    @property
    def count(self) -> int:
        return len(self.per_sample["mse"])

    @property
    def means(self) -> dict:
        return {k: float(np.mean(v)) if v else float("nan") for k, v in self.per_sample.items()}

    def add(self, pred, target) -> None:
        for k in METRICS:
            self.per_sample[k].append(METRIC_FUNCS[k](pred, target))

    def to_json(self) -> str:
        samples = [{k: self.per_sample[k][i] for k in METRICS} for i in range(self.count)]
        return json.dumps({"predictor": self.predictor, "count": self.count,
                           "means": self.means, "per_sample": samples})

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        rep = cls(d["predictor"])
        for row in d["per_sample"]:
            for k in METRICS:
                rep.per_sample[k].append(float(row[k]))
        return rep


def evaluate(predictor, dataset, name: str = "predictor") -> MetricsReport:
    """Run ``predictor(capacitance) -> image`` over a dataset in index order."""
    report = MetricsReport(name)
    for i in range(len(dataset)):
        c, y = dataset[i]
        try:
            pred = predictor(c)
        except Exception as exc:
            raise RuntimeError(f"predictor failed on sample {i}: {exc}") from exc
        report.add(pred, y)
    return report


def stitch(windows, overlap_px: int = 0) -> np.ndarray:
    """Concatenate windows left to right, cross-fading linearly over ``overlap_px``."""
    windows = [np.asarray(w) for w in windows]
    if not windows:
        raise ValueError("need at least one window")
    h = windows[0].shape[0]
    if any(w.shape[0] != h for w in windows):
        raise ValueError("all windows must have the same height")
    if overlap_px < 0 or any(overlap_px >= w.shape[1] for w in windows) and len(windows) > 1:
        raise ValueError("overlap must be non-negative and narrower than every window")
    if overlap_px == 0:
        return np.concatenate(windows, axis=1)
    out = windows[0].astype(np.float64)
    ramp = (np.arange(overlap_px) + 1) / (overlap_px + 1)
    for w in windows[1:]:
        w = w.astype(np.float64)
        blend = (1 - ramp) * out[:, -overlap_px:] + ramp * w[:, :overlap_px]
        out = np.concatenate([out[:, :-overlap_px], blend, w[:, overlap_px:]], axis=1)
    return out
