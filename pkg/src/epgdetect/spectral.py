"""Log-power spectra of segments and k-means clustering of confident ones."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .eeg_io import atomic_write_text

LOG_FLOOR = 1e-12


@dataclass
class Spectrum:
    frequencies_hz: np.ndarray
    log_power: np.ndarray
    provenance: tuple = ()


def welch_log_power(values, fs: float = 512, window_len: int = 512, overlap: float = 0.5, provenance=()) -> Spectrum:
    """Hann-window Welch PSD, returned as log10 with a 1e-12 floor."""
    values = np.asarray(values, dtype=np.float64)
    if window_len > values.shape[-1]:
        raise ValueError(f"window_len {window_len} longer than segment ({values.shape[-1]} samples)")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    freqs, psd = welch_psd(values, fs, window_len, overlap)
    return Spectrum(freqs, np.log10(np.maximum(psd, LOG_FLOOR)), provenance)


def welch_psd(values, fs=512, window_len=512, overlap=0.5):
    """Linear one-sided PSD (units^2 / Hz) along the last axis."""
    return signal.welch(
        values, fs=fs, window="hann", nperseg=window_len, noverlap=int(window_len * overlap),
        detrend="constant", scaling="density", axis=-1,
    )


def log_power_matrix(values: np.ndarray, fs=512, window_len=512, overlap=0.5, band=(0.5, 160.0)):
    """Row-wise log10 spectra restricted to ``band``: ``(freqs, [N, F])``."""
    freqs, psd = welch_psd(np.asarray(values, dtype=np.float64), fs, window_len, overlap)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return freqs[sel], np.log10(np.maximum(psd[..., sel], LOG_FLOOR))


def select_certain(probs: np.ndarray, threshold: float = 0.999):
    """Indices whose winning-class probability exceeds ``threshold``.

    Returns ``(indices, predicted_class)``.
    """
    if not 0.5 < threshold < 1:
        raise ValueError(f"threshold must be in (0.5, 1), got {threshold}")
    probs = np.asarray(probs, dtype=np.float64)
    top = probs.max(axis=1)
    idx = np.flatnonzero(top > threshold)
    return idx, probs[idx].argmax(axis=1)


# -- k-means -------------------------------------------------------------------


@dataclass
class ClusterReport:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    class_counts: np.ndarray | None = None  # [k, n_classes]
    mean_spectra: np.ndarray | None = None
    std_spectra: np.ndarray | None = None
    frequencies_hz: np.ndarray | None = None
    elbow: list = field(default_factory=list)

    def class_percentages(self) -> np.ndarray:
        counts = self.class_counts.astype(float)
        totals = counts.sum(axis=1, keepdims=True)
        return np.divide(100.0 * counts, totals, out=np.zeros_like(counts), where=totals > 0)

    def to_json(self, class_names=("BL", "EPG")) -> str:
        clusters = []
        pct = self.class_percentages() if self.class_counts is not None else None
        for c in range(self.k):
            row = {"cluster": c, "size": int((self.assignments == c).sum())}
            if pct is not None:
                row["counts"] = {n: int(v) for n, v in zip(class_names, self.class_counts[c])}
                row["percent"] = {n: float(v) for n, v in zip(class_names, pct[c])}
            clusters.append(row)
        doc = {
            "k": self.k,
            "inertia": self.inertia,
            "n_iter": self.n_iter,
            "clusters": clusters,
            "assignments": self.assignments.tolist(),
            "elbow": [{"k": k, "inertia": v} for k, v in self.elbow],
        }
        return json.dumps(doc, indent=1) + "\n"

    def spectra_csv(self) -> str:
        lines = ["cluster,freq_hz,mean_log_power,std_log_power"]
        for c in range(self.k):
            for f, m, s in zip(self.frequencies_hz, self.mean_spectra[c], self.std_spectra[c]):
                lines.append(f"{c},{f:g},{m:.6g},{s:.6g}")
        return "\n".join(lines) + "\n"


def _sqdist(x, centroids):
    d = (x * x).sum(1)[:, None] - 2 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = _sqdist(x, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids.append(x[idx])
        d2 = np.minimum(d2, _sqdist(x, x[idx][None])[:, 0])
    return np.array(centroids, dtype=np.float64)


def kmeans(data, k: int, seed: int = 0, max_iter: int = 300) -> ClusterReport:
    """Lloyd's algorithm from k-means++ seeds, Euclidean distance."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(x), -1)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        new = _sqdist(x, centroids).argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = x[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = _sqdist(x, centroids)[np.arange(len(x)), assign].argmax()
                centroids[c] = x[far]
                assign[far] = c
    inertia = float(((x - centroids[assign]) ** 2).sum())
    return ClusterReport(k, assign, centroids, inertia, it)


def best_kmeans(data, k: int, seeds=range(5), max_iter: int = 300) -> ClusterReport:
    runs = [kmeans(data, k, seed=s, max_iter=max_iter) for s in seeds]
    return min(runs, key=lambda r: r.inertia)


def elbow_curve(data, k_range, seeds=range(5)) -> list[tuple[int, float]]:
    """Best-of-restarts inertia for each k."""
    n = len(data)
    out = []
    for k in k_range:
        if not 1 <= k <= n:
            raise ValueError(f"k={k} outside [1, {n}]")
        out.append((k, best_kmeans(data, k, seeds).inertia))
    return out


def elbow_k(curve) -> int:
    """k with the largest second difference of inertia (interior points only)."""
    ks = [k for k, _ in curve]
    inertia = np.array([v for _, v in curve], dtype=np.float64)
    if len(curve) < 3:
        return ks[0]
    second = inertia[:-2] - 2 * inertia[1:-1] + inertia[2:]
    return ks[1 + int(np.argmax(second))]


def cluster_spectra(freqs, log_spectra, classes, k=4, seeds=range(5), k_range=range(1, 11), n_classes=2) -> ClusterReport:
    """Cluster log spectra, attaching class counts, mean/std spectra and the elbow curve."""
    x = np.asarray(log_spectra, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    k_range = [kk for kk in k_range if kk <= len(x)]
    curve = elbow_curve(x, k_range, seeds) if k_range else []
    if k == "auto":
        k = elbow_k(curve)
    report = best_kmeans(x, k, seeds)
    counts = np.zeros((k, n_classes), dtype=np.int64)
    np.add.at(counts, (report.assignments, classes), 1)
    report.class_counts = counts
    report.frequencies_hz = np.asarray(freqs)
    report.mean_spectra = np.array([x[report.assignments == c].mean(0) for c in range(k)])
    report.std_spectra = np.array([x[report.assignments == c].std(0) for c in range(k)])
    report.elbow = curve
    return report


def write_cluster_report(report: ClusterReport, json_path, csv_path) -> None:
    atomic_write_text(json_path, report.to_json())
    atomic_write_text(csv_path, report.spectra_csv())
