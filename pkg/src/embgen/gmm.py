"""Diagonal-covariance Gaussian mixture baseline fit by EM.

The mixture is estimated on quantile-normalized embeddings (the same
pipeline the VAE trains on, so the two generators are compared on equal
footing). Initialization is k-means++ seeding followed by a hard assignment;
the component count can be chosen by scanning k against a per-dimension MSE
curve and stopping where the relative improvement flattens.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .store import (
    EmbeddingDataset,
    EmbeddingRecord,
    NormalizationStats,
    denormalize,
    fit_normalizer,
    normalize,
)

VARIANCE_FLOOR = 1e-6
GMM_MAGIC = b"GMMK0001"
GMM_FORMAT = "gmm-model-v1"


@dataclass
class GmmModel:
    k: int
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, D), in normalized space
    variances: np.ndarray  # (k, D), floored
    dim: int
    norm_stats: NormalizationStats
    log_likelihood_trace: list[float] = field(default_factory=list)
    reinit_events: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.weights.shape != (self.k,):
            raise ValidationError("weights must have shape (k,)")
        if self.means.shape != (self.k, self.dim) or self.variances.shape != (self.k, self.dim):
            raise ValidationError("means and variances must have shape (k, dim)")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValidationError("weights must sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-12)):
            raise ValidationError("variances below the floor")


@dataclass
class KScanReport:
    entries: list[tuple[int, float]]  # (k, mse) for successful fits
    selected_k: int
    failures: list[tuple[int, str]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "entries": [{"k": k, "mse": mse} for k, mse in self.entries],
            "selected_k": self.selected_k,
            "failures": [{"k": k, "error": msg} for k, msg in self.failures],
        }


def _log_density(x: np.ndarray, model_means, model_vars, model_weights) -> np.ndarray:
    """Per-point, per-component joint log density log(w_k) + log N(x; mu_k, var_k)."""
    # (N, k) via broadcasting over (N, 1, D) - (k, D)
    diff = x[:, None, :] - model_means[None, :, :]
    log_pdf = -0.5 * (
        np.log(2 * np.pi * model_vars)[None, :, :] + diff * diff / model_vars[None, :, :]
    ).sum(axis=2)
    return log_pdf + np.log(model_weights)[None, :]


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(a, axis=axis, keepdims=True)
    return (peak + np.log(np.exp(a - peak).sum(axis=axis, keepdims=True))).squeeze(axis)


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            ((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def _initial_parameters(x: np.ndarray, k: int, rng: np.random.Generator):
    n, d = x.shape
    centers = _kmeanspp_centers(x, k, rng)
    assign = np.argmin(((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2), axis=1)
    global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    means = np.empty((k, d))
    variances = np.empty((k, d))
    counts = np.zeros(k)
    for j in range(k):
        members = x[assign == j]
        counts[j] = len(members)
        if len(members) == 0:
            means[j] = centers[j]
            variances[j] = global_var
        else:
            means[j] = members.mean(axis=0)
            variances[j] = np.maximum(members.var(axis=0), VARIANCE_FLOOR)
    weights = np.maximum(counts, 1.0)
    return weights / weights.sum(), means, variances


def _fit_once(x: np.ndarray, k: int, rng: np.random.Generator, max_iters: int, tol: float):
    n, d = x.shape
    weights, means, variances = _initial_parameters(x, k, rng)
    trace: list[float] = []
    reinits: list[dict] = []
    prev_ll = -np.inf
    for iteration in range(max_iters):
        joint = _log_density(x, means, variances, weights)
        norm = _logsumexp(joint, axis=1)
        mean_ll = float(norm.mean())
        trace.append(mean_ll)
        resp = np.exp(joint - norm[:, None])
        mass = resp.sum(axis=0)
        empty = np.where(mass < 1e-10)[0]
        if empty.size:
            # revive each dead component at the worst-represented point
            order = np.argsort(norm)
            global_var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
            for rank, j in enumerate(empty):
                pick = int(order[rank % n])
                means[j] = x[pick]
                variances[j] = global_var
                weights[j] = 1.0 / n
                reinits.append({"iteration": iteration, "component": int(j), "point": pick})
            weights = weights / weights.sum()
            prev_ll = -np.inf  # monotonicity restarts after a revival
            continue
        weights = mass / n
        means = (resp.T @ x) / mass[:, None]
        sq = resp.T @ (x * x) / mass[:, None]
        variances = np.maximum(sq - means * means, VARIANCE_FLOOR)
        if mean_ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = mean_ll
    return weights, means, variances, trace, reinits


def fit_gmm(
    data: EmbeddingDataset,
    k: int,
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-7,
    n_init: int = 1,
    norm_stats: NormalizationStats | None = None,
) -> GmmModel:
    """EM on normalized embeddings with k-means++ seeding; deterministic per seed."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(data) < k:
        raise ValidationError(f"need at least k={k} records, dataset has {len(data)}")
    stats = norm_stats if norm_stats is not None else fit_normalizer(data)
    x = normalize(data.matrix().astype(np.float64), stats)
    best = None
    for restart in range(max(1, n_init)):
        rng = np.random.default_rng(seed + restart)
        weights, means, variances, trace, reinits = _fit_once(x, k, rng, max_iters, tol)
        if best is None or trace[-1] > best[3][-1]:
            best = (weights, means, variances, trace, reinits)
    weights, means, variances, trace, reinits = best
    return GmmModel(
        k=k,
        weights=weights,
        means=means,
        variances=variances,
        dim=data.dim,
        norm_stats=stats,
        log_likelihood_trace=trace,
        reinit_events=reinits,
    )


def gmm_mse(data: EmbeddingDataset, model: GmmModel) -> float:
    """Per-dimension MSE between each point and its argmax-responsibility mean."""
    if data.dim != model.dim:
        raise ValidationError(f"dataset dim {data.dim} != model dim {model.dim}")
    x = normalize(data.matrix().astype(np.float64), model.norm_stats)
    joint = _log_density(x, model.means, model.variances, model.weights)
    best = np.argmax(joint, axis=1)
    diff = x - model.means[best]
    return float((diff * diff).sum(axis=1).mean() / model.dim)


def scan_k(
    data: EmbeddingDataset,
    ks: list[int],
    seed: int = 0,
    max_iters: int = 200,
    tol: float = 1e-7,
    n_init: int = 1,
    improvement_threshold: float = 0.05,
) -> KScanReport:
    """Fit each k and pick the first whose relative MSE gain falls below 5%.

    The full curve is always reported so the automated pick can be overridden
    by inspection.
    """
    if not ks:
        raise ValidationError("ks must be non-empty")
    ks = sorted(set(int(k) for k in ks))
    if ks[0] < 1:
        raise ValidationError("every k must be >= 1")
    stats = fit_normalizer(data)
    entries: list[tuple[int, float]] = []
    failures: list[tuple[int, str]] = []
    for k in ks:
        try:
            model = fit_gmm(data, k, seed=seed, max_iters=max_iters, tol=tol,
                            n_init=n_init, norm_stats=stats)
            entries.append((k, gmm_mse(data, model)))
        except ValidationError as exc:
            failures.append((k, str(exc)))
    if not entries:
        raise ValidationError("every scanned k failed to fit")
    selected = entries[-1][0]
    for (k_prev, mse_prev), (k_cur, mse_cur) in zip(entries, entries[1:]):
        improvement = (mse_prev - mse_cur) / mse_prev if mse_prev > 0 else 0.0
        if improvement < improvement_threshold:
            selected = k_cur
            break
    return KScanReport(entries=entries, selected_k=selected, failures=failures)


def sample_gmm(model: GmmModel, count: int, seed: int = 0) -> EmbeddingDataset:
    """Ancestral draws: component per weights, then the diagonal Gaussian."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    components = rng.choice(model.k, size=count, p=model.weights)
    eps = rng.normal(size=(count, model.dim))
    normalized = model.means[components] + np.sqrt(model.variances[components]) * eps
    vectors = denormalize(np.clip(normalized, -1.0, 1.0), model.norm_stats)
    records = [
        EmbeddingRecord(f"gen-{seed}-{i:05d}", f"gen-{seed}-{i:05d}",
                        vectors[i].astype(np.float32))
        for i in range(count)
    ]
    return EmbeddingDataset(dim=model.dim, records=records,
                            source_tag=f"gmm-sampled seed={seed} k={model.k}")


# ---------------------------------------------------------------------------
# serialization: magic | u32 header length | JSON header | f32 means | f32 variances

def save_gmm(model: GmmModel, path: str | Path) -> Path:
    path = Path(path)
    header = {
        "format": GMM_FORMAT,
        "k": model.k,
        "dim": model.dim,
        "weights": model.weights.tolist(),
        "norm_stats": model.norm_stats.to_json(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(model.means.astype("<f4").tobytes(order="C"))
        fh.write(model.variances.astype("<f4").tobytes(order="C"))
    return path


def load_gmm(path: str | Path) -> GmmModel:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"model file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:8] != GMM_MAGIC:
        raise ParseError(f"{path}: byte 0: bad or missing magic")
    (header_len,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: byte 12: corrupt header") from exc
    if header.get("format") != GMM_FORMAT:
        raise ParseError(f"{path}: unsupported format {header.get('format')!r}")
    k, dim = int(header["k"]), int(header["dim"])
    base = 12 + header_len
    block = 4 * k * dim
    means = np.frombuffer(raw, dtype="<f4", count=k * dim, offset=base).reshape(k, dim)
    variances = np.frombuffer(raw, dtype="<f4", count=k * dim, offset=base + block).reshape(k, dim)
    return GmmModel(
        k=k,
        weights=np.asarray(header["weights"], dtype=np.float64),
        means=means.astype(np.float64),
        variances=np.maximum(variances.astype(np.float64), VARIANCE_FLOOR),
        dim=dim,
        norm_stats=NormalizationStats.from_json(header["norm_stats"]),
    )
