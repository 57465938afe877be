"""Trace ingestion, persistence, preprocessing and noise diagnostics.

On-disk format: ``<name>.manifest.json`` (metadata, full-precision floats)
plus ``<name>.f64`` holding the sample matrix as little-endian float64,
row-major, one trace per row. The first ``background_samples`` columns of
each row are the pre-measurement background segment declared in the
manifest. CSV interchange writes one trace per row with a header row
carrying dt.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .markov import SpinState, TraceBatch

FORMAT_VERSION = 1


@dataclass
class BundleManifest:
    dt: float
    n_traces: int
    n_samples: int
    background_samples: int = 0
    v0: float = 1.0
    labels: list[int] | None = None
    corrected: bool = False
    version: int = FORMAT_VERSION


class TraceBundle:
    """Persistent container for a batch of traces plus metadata."""

    def __init__(self, manifest: BundleManifest, data: np.ndarray):
        data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        expected = (manifest.n_traces, manifest.background_samples + manifest.n_samples)
        if data.shape != expected:
            raise ValueError(f"data shape {data.shape} does not match manifest {expected}")
        if manifest.dt <= 0:
            raise ValueError("dt must be > 0")
        if manifest.labels is not None and len(manifest.labels) != manifest.n_traces:
            raise ValueError("labels must have one entry per trace")
        self.manifest = manifest
        self.data = data

    @property
    def readout(self) -> np.ndarray:
        return self.data[:, self.manifest.background_samples :]

    @property
    def backgrounds(self) -> np.ndarray | None:
        b = self.manifest.background_samples
        return self.data[:, :b] if b > 0 else None

    @classmethod
    def from_batch(cls, batch: TraceBatch, v0: float = 1.0, corrected: bool = False) -> "TraceBundle":
        bg = batch.backgrounds
        n_bg = bg.shape[1] if bg is not None else 0
        data = np.hstack([bg, batch.samples]) if bg is not None else batch.samples
        labels = [int(v) for v in batch.labels] if batch.labels is not None else None
        manifest = BundleManifest(
            dt=batch.dt,
            n_traces=batch.n_traces,
            n_samples=batch.n_samples,
            background_samples=n_bg,
            v0=v0,
            labels=labels,
            corrected=corrected,
        )
        return cls(manifest, data)

    def to_batch(self) -> TraceBatch:
        labels = (
            np.asarray(self.manifest.labels, dtype=np.int8)
            if self.manifest.labels is not None
            else None
        )
        return TraceBatch(
            dt=self.manifest.dt,
            samples=self.readout.copy(),
            labels=labels,
            backgrounds=self.backgrounds.copy() if self.backgrounds is not None else None,
        )

    def save(self, prefix: str) -> tuple[str, str]:
        manifest_path = f"{prefix}.manifest.json"
        data_path = f"{prefix}.f64"
        _atomic_write_bytes(data_path, self.data.astype("<f8").tobytes())
        _atomic_write_text(manifest_path, json.dumps(asdict(self.manifest), indent=2) + "\n")
        return manifest_path, data_path

    @classmethod
    def load(cls, prefix: str) -> "TraceBundle":
        manifest_path = f"{prefix}.manifest.json"
        data_path = f"{prefix}.f64"
        for path in (manifest_path, data_path):
            if not os.path.exists(path):
                raise FileNotFoundError(path)
        with open(manifest_path) as fh:
            manifest = BundleManifest(**json.load(fh))
        raw = np.fromfile(data_path, dtype="<f8")
        cols = manifest.background_samples + manifest.n_samples
        if raw.size != manifest.n_traces * cols:
            raise ValueError("data file size does not match manifest dimensions")
        return cls(manifest, raw.reshape(manifest.n_traces, cols).astype(np.float64))

    def to_csv(self, path: str) -> None:
        lines = [f"dt,{self.manifest.dt!r}"]
        for row in self.data:
            lines.append(",".join(repr(float(v)) for v in row))
        _atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "TraceBundle":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if len(header) != 2 or header[0] != "dt":
                raise ValueError("CSV must start with a 'dt,<value>' header row")
            dt = float(header[1])
            rows = [
                np.array(line.strip().split(","), dtype=float) for line in fh if line.strip()
            ]
        data = np.vstack(rows)
        manifest = BundleManifest(dt=dt, n_traces=data.shape[0], n_samples=data.shape[1])
        return cls(manifest, data)


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _atomic_write_text(path: str, payload: str) -> None:
    _atomic_write_bytes(path, payload.encode())


def drift_correct(bundle: TraceBundle, window: int = 50) -> TraceBundle:
    """Subtract the running mean of past background segments from each trace.

    Trace k is corrected with the mean background of traces
    max(0, k - window) .. k - 1; the first trace, having no past, uses its
    own background. Causal by construction: corrected trace k never
    depends on traces with index >= k (other than itself at k = 0).
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if bundle.manifest.background_samples < 1:
        raise ValueError("drift correction requires background segments")
    bg_means = bundle.backgrounds.mean(axis=1)
    n = bundle.manifest.n_traces
    cum = np.concatenate([[0.0], np.cumsum(bg_means)])
    correction = np.empty(n)
    correction[0] = bg_means[0]
    for k in range(1, n):
        lo = max(0, k - window)
        correction[k] = (cum[k] - cum[lo]) / (k - lo)
    data = bundle.data - correction[:, None]
    manifest = BundleManifest(**{**asdict(bundle.manifest), "corrected": True})
    return TraceBundle(manifest, data)


def with_linear_drift(bundle: TraceBundle, step: float) -> TraceBundle:
    """Copy of the bundle with an offset of step * k added to trace k."""
    offsets = step * np.arange(bundle.manifest.n_traces)
    manifest = BundleManifest(**asdict(bundle.manifest))
    return TraceBundle(manifest, bundle.data + offsets[:, None])


class IqBatch:
    """In-phase/quadrature voltage pairs, one row per shot."""

    def __init__(self, values: np.ndarray):
        values = np.ascontiguousarray(np.asarray(values, dtype=float))
        if values.ndim != 2 or values.shape[1] != 2 or values.shape[0] < 2:
            raise ValueError("IqBatch needs an (n, 2) matrix with n >= 2")
        self.values = values

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class IqProjection:
    projected: np.ndarray
    delta_v: float
    sigma: float
    snr: float
    means: np.ndarray
    weights: np.ndarray
    log_likelihood: float


def iq_project(batch: IqBatch, seed: int = 0, n_restarts: int = 10) -> IqProjection:
    """Project I/Q data onto the axis joining two fitted cluster centres.

    A two-component Gaussian mixture with a shared isotropic covariance is
    fitted by EM (distance-weighted seeding, ``n_restarts`` restarts); the
    projection axis joins the two means. Returns signed projections about
    the midpoint, the mean separation, the pooled per-axis std and their
    ratio as SNR.
    """
    x = batch.values
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    scale = float(np.std(x))
    if scale == 0.0:
        raise ValueError("degenerate batch: all points identical")

    best = None
    for _ in range(n_restarts):
        m0 = x[rng.integers(n)]
        d2 = ((x - m0) ** 2).sum(axis=1)
        if d2.sum() == 0.0:
            raise ValueError("degenerate batch: all points identical")
        m1 = x[rng.choice(n, p=d2 / d2.sum())]
        means = np.vstack([m0, m1]).astype(float)
        weights = np.array([0.5, 0.5])
        var = float(np.var(x))
        ll_prev = -np.inf
        for _ in range(300):
            d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
            logp = np.log(weights)[None, :] - d / (2.0 * var) - math.log(2.0 * math.pi * var)
            m = logp.max(axis=1, keepdims=True)
            p = np.exp(logp - m)
            norm = p.sum(axis=1, keepdims=True)
            resp = p / norm
            ll = float((np.log(norm[:, 0]) + m[:, 0]).sum())
            wsum = resp.sum(axis=0)
            weights = wsum / n
            means = (resp.T @ x) / wsum[:, None]
            d = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
            var = float((resp * d).sum() / (2.0 * n))
            var = max(var, 1e-30 * scale**2)
            if abs(ll - ll_prev) < 1e-12 * max(abs(ll), 1.0):
                break
            ll_prev = ll
        if best is None or ll > best[0]:
            best = (ll, means.copy(), weights.copy(), var)

    ll, means, weights, var = best
    sep = means[1] - means[0]
    delta_v = float(np.linalg.norm(sep))
    # a lone cluster split in two lands at sub-sigma separation
    if delta_v < math.sqrt(var):
        raise ValueError("mixture degeneracy: clusters are not resolved")
    axis = sep / delta_v
    midpoint = 0.5 * (means[0] + means[1])
    projected = (x - midpoint) @ axis
    sigma = math.sqrt(var)
    return IqProjection(
        projected=projected,
        delta_v=delta_v,
        sigma=sigma,
        snr=delta_v / sigma,
        means=means,
        weights=weights,
        log_likelihood=ll,
    )


def build_histogram(values, bins: int, range_: tuple[float, float] | None = None):
    """Uniform histogram; returns (bin_centers, counts).

    Bins are left-closed with the last bin right-closed, so counts always
    conserve the number of input values inside the range.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot histogram an empty input")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    counts, edges = np.histogram(values, bins=bins, range=range_)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts


@dataclass
class NoiseScalingResult:
    t_read: np.ndarray
    inv_snr: np.ndarray
    fitted: bool
    slope: float = float("nan")
    intercept: float = float("nan")
    slope_sigma: float = float("nan")
    intercept_sigma: float = float("nan")
    n_fit_points: int = 0


def noise_scaling(bundle: TraceBundle, t_read_list, fit_fraction: float = 0.5) -> NoiseScalingResult:
    """Empirical 1/SNR against readout time, with a white-noise-law fit.

    Needs two-class labels. Per t_read the class separation of the window
    averages gives SNR = |m1 - m0| / pooled sigma. A straight line in
    1/sqrt(t_read) is fitted over the short-time region (the shortest
    ``fit_fraction`` of the points, at least two).
    """
    batch = bundle.to_batch()
    if batch.labels is None:
        raise ValueError("noise scaling requires labelled traces")
    labs = np.unique(batch.labels)
    if labs.size != 2:
        raise ValueError("noise scaling requires exactly two label classes")
    mask0 = batch.labels == labs[0]
    if mask0.sum() < 2 or (~mask0).sum() < 2:
        raise ValueError("need at least two traces per class")

    t_read_list = np.asarray(sorted(t_read_list), dtype=float)
    inv_snr = np.empty(t_read_list.size)
    cums = np.cumsum(batch.samples, axis=1)
    for i, t in enumerate(t_read_list):
        n_win = int(math.floor(t / batch.dt + 1e-9))
        if n_win < 1 or n_win > batch.n_samples:
            raise ValueError("t_read outside the trace duration")
        avgs = cums[:, n_win - 1] / n_win
        a, b = avgs[mask0], avgs[~mask0]
        delta = abs(b.mean() - a.mean())
        pooled = math.sqrt(
            ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1))
            / (a.size + b.size - 2)
        )
        inv_snr[i] = pooled / delta

    if t_read_list.size < 2:
        return NoiseScalingResult(t_read=t_read_list, inv_snr=inv_snr, fitted=False)

    n_fit = max(2, int(round(fit_fraction * t_read_list.size)))
    xs = 1.0 / np.sqrt(t_read_list[:n_fit])
    ys = inv_snr[:n_fit]
    if n_fit >= 3:
        coeffs, cov = np.polyfit(xs, ys, 1, cov=True)
        sig_slope = float(np.sqrt(cov[0, 0]))
        sig_icept = float(np.sqrt(cov[1, 1]))
    else:
        coeffs = np.polyfit(xs, ys, 1)
        sig_slope = sig_icept = float("nan")
    return NoiseScalingResult(
        t_read=t_read_list,
        inv_snr=inv_snr,
        fitted=True,
        slope=float(coeffs[0]),
        intercept=float(coeffs[1]),
        slope_sigma=sig_slope,
        intercept_sigma=sig_icept,
        n_fit_points=n_fit,
    )
