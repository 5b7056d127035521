"""Embedding tables with identity metadata, file formats, and quantile normalization.

An embedding table is an N x D matrix of float32 vectors, one per utterance,
each tagged with an utterance id and a speaker id. Two on-disk layouts are
supported: ``manifest_binary`` (a JSONL manifest next to a packed float32
matrix) and plain ``jsonl`` with inline vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ParseError, ValidationError

MATRIX_MAGIC = b"EMBT0001"


@dataclass(frozen=True)
class EmbeddingRecord:
    """One utterance: identity keys plus its embedding vector (float32)."""

    utterance_id: str
    speaker_id: str
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise ValidationError(
                f"record {self.utterance_id!r}: vector must be 1-D, got shape {vec.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise ValidationError(f"record {self.utterance_id!r}: vector has non-finite components")
        object.__setattr__(self, "vector", vec)


@dataclass
class EmbeddingDataset:
    """An ordered collection of records sharing one embedding dimension."""

    dim: int
    records: list[EmbeddingRecord]
    source_tag: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        if not self.records:
            raise ValidationError("dataset must contain at least one record")
        seen: set[str] = set()
        for rec in self.records:
            if rec.vector.shape[0] != self.dim:
                raise ValidationError(
                    f"record {rec.utterance_id!r} has dim {rec.vector.shape[0]}, expected {self.dim}"
                )
            if rec.utterance_id in seen:
                raise ValidationError(f"duplicate utterance_id {rec.utterance_id!r}")
            seen.add(rec.utterance_id)

    def __len__(self) -> int:
        return len(self.records)

    def matrix(self) -> np.ndarray:
        """All vectors stacked row-wise as an (N, D) float32 array."""
        return np.stack([rec.vector for rec in self.records])

    def by_speaker(self) -> dict[str, list[str]]:
        """Map speaker_id -> utterance_ids, preserving record order."""
        out: dict[str, list[str]] = {}
        for rec in self.records:
            out.setdefault(rec.speaker_id, []).append(rec.utterance_id)
        return out

    def utterance_ids(self) -> list[str]:
        return [rec.utterance_id for rec in self.records]

    @classmethod
    def from_matrix(
        cls,
        matrix: np.ndarray,
        utterance_ids: Iterable[str],
        speaker_ids: Iterable[str],
        source_tag: str = "",
    ) -> "EmbeddingDataset":
        matrix = np.asarray(matrix, dtype=np.float32)
        records = [
            EmbeddingRecord(u, s, matrix[i])
            for i, (u, s) in enumerate(zip(utterance_ids, speaker_ids))
        ]
        if len(records) != matrix.shape[0]:
            raise ValidationError("id lists shorter than matrix row count")
        return cls(dim=matrix.shape[1], records=records, source_tag=source_tag)


@dataclass
class NormalizationStats:
    """Per-feature clipping quantiles used by the [-1, 1] min-max map."""

    dim: int
    q_low: np.ndarray
    q_high: np.ndarray

    def __post_init__(self):
        self.q_low = np.asarray(self.q_low, dtype=np.float64)
        self.q_high = np.asarray(self.q_high, dtype=np.float64)
        if self.q_low.shape != (self.dim,) or self.q_high.shape != (self.dim,):
            raise ValidationError("quantile arrays must have length dim")
        if np.any(self.q_low > self.q_high):
            raise ValidationError("q_low must not exceed q_high")

    @classmethod
    def identity(cls, dim: int) -> "NormalizationStats":
        """Stats under which normalize is the identity on [-1, 1]."""
        return cls(dim=dim, q_low=-np.ones(dim), q_high=np.ones(dim))

    def to_json(self) -> dict:
        return {"dim": self.dim, "q_low": self.q_low.tolist(), "q_high": self.q_high.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(dim=int(obj["dim"]), q_low=np.asarray(obj["q_low"]), q_high=np.asarray(obj["q_high"]))


# ---------------------------------------------------------------------------
# file formats

def _base_path(path: str | Path) -> Path:
    """Strip a known dataset suffix so callers may pass any of the pair's files."""
    p = Path(path)
    name = p.name
    for suffix in (".manifest.jsonl", ".embt", ".jsonl"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def manifest_paths(path: str | Path) -> tuple[Path, Path]:
    base = _base_path(path)
    return base.with_name(base.name + ".manifest.jsonl"), base.with_name(base.name + ".embt")


def jsonl_path(path: str | Path) -> Path:
    base = _base_path(path)
    return base.with_name(base.name + ".jsonl")


def save_dataset(data: EmbeddingDataset, path: str | Path, format: str = "manifest_binary") -> list[Path]:
    """Write the dataset; returns the paths created."""
    if format == "manifest_binary":
        manifest, matrix_file = manifest_paths(path)
        matrix = data.matrix()
        n, d = matrix.shape
        with open(matrix_file, "wb") as fh:
            fh.write(MATRIX_MAGIC)
            fh.write(struct.pack("<II", n, d))
            fh.write(matrix.astype("<f4").tobytes(order="C"))
        with open(manifest, "w", encoding="utf-8") as fh:
            for row, rec in enumerate(data.records):
                fh.write(json.dumps(
                    {"utterance_id": rec.utterance_id, "speaker_id": rec.speaker_id, "row": row}
                ) + "\n")
        return [manifest, matrix_file]
    if format == "jsonl":
        target = jsonl_path(path)
        with open(target, "w", encoding="utf-8") as fh:
            for rec in data.records:
                fh.write(json.dumps(
                    {
                        "utterance_id": rec.utterance_id,
                        "speaker_id": rec.speaker_id,
                        "vector": [float(v) for v in rec.vector],
                    }
                ) + "\n")
        return [target]
    raise ValidationError(f"unknown dataset format {format!r}")


def _read_manifest(manifest: Path) -> list[dict]:
    entries = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{manifest}: line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("utterance_id", "speaker_id", "row"):
                if key not in obj:
                    raise ParseError(f"{manifest}: line {lineno}: missing field {key!r}")
            entries.append(obj)
    return entries


def load_dataset(path: str | Path, format: str = "manifest_binary") -> EmbeddingDataset:
    """Load a dataset saved by :func:`save_dataset`; dimension comes from the file."""
    if format == "manifest_binary":
        manifest, matrix_file = manifest_paths(path)
        if not manifest.exists():
            raise ParseError(f"manifest file not found: {manifest}")
        if not matrix_file.exists():
            raise ParseError(f"matrix file not found: {matrix_file}")
        raw = matrix_file.read_bytes()
        if len(raw) < 16 or raw[:8] != MATRIX_MAGIC:
            raise ParseError(f"{matrix_file}: byte 0: bad or missing magic header")
        n, d = struct.unpack("<II", raw[8:16])
        expected = 16 + 4 * n * d
        if len(raw) != expected:
            raise ParseError(
                f"{matrix_file}: byte {min(len(raw), expected)}: expected {expected} bytes for "
                f"{n}x{d} matrix, file has {len(raw)}"
            )
        matrix = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d)
        entries = _read_manifest(manifest)
        if len(entries) != n:
            raise ValidationError(f"{manifest}: {len(entries)} manifest rows for {n} matrix rows")
        rows_seen = sorted(e["row"] for e in entries)
        if rows_seen != list(range(n)):
            raise ValidationError(f"{manifest}: row indices must cover 0..{n - 1} exactly once")
        by_row = {e["row"]: e for e in entries}
        records = [
            EmbeddingRecord(by_row[i]["utterance_id"], by_row[i]["speaker_id"], matrix[i])
            for i in range(n)
        ]
        return EmbeddingDataset(dim=d, records=records, source_tag=str(_base_path(path)))
    if format == "jsonl":
        target = jsonl_path(path)
        if not target.exists():
            raise ParseError(f"dataset file not found: {target}")
        records = []
        dim = None
        with open(target, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{target}: line {lineno}: invalid JSON ({exc.msg})") from exc
                try:
                    vec = np.asarray(obj["vector"], dtype=np.float32)
                    rec = EmbeddingRecord(obj["utterance_id"], obj["speaker_id"], vec)
                except KeyError as exc:
                    raise ParseError(f"{target}: line {lineno}: missing field {exc}") from exc
                if dim is None:
                    dim = rec.vector.shape[0]
                records.append(rec)
        if not records:
            raise ParseError(f"{target}: line 1: file contains no records")
        return EmbeddingDataset(dim=dim, records=records, source_tag=str(_base_path(path)))
    raise ValidationError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------------------
# quantile normalization

Q_LOW = 0.001
Q_HIGH = 0.999


def fit_normalizer(data: EmbeddingDataset) -> NormalizationStats:
    """Per-feature 0.001/0.999 quantiles, linear interpolation between order stats."""
    if len(data) < 2:
        raise ValidationError("fitting the normalizer requires at least 2 records")
    matrix = data.matrix().astype(np.float64)
    if not np.all(np.isfinite(matrix)):
        raise ValidationError("dataset contains non-finite values")
    q_low = np.quantile(matrix, Q_LOW, axis=0, method="linear")
    q_high = np.quantile(matrix, Q_HIGH, axis=0, method="linear")
    return NormalizationStats(dim=data.dim, q_low=q_low, q_high=q_high)


def normalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Clip to the fitted quantiles, then map [q_low, q_high] -> [-1, 1] per feature.

    Constant features (q_low == q_high) map to 0. Accepts a vector of length D
    or an (N, D) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ValidationError(f"input dim {x.shape[-1]} != stats dim {stats.dim}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("normalize: input has non-finite components")
    span = stats.q_high - stats.q_low
    clipped = np.clip(x, stats.q_low, stats.q_high)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 * (clipped - stats.q_low) / span - 1.0
    return np.where(span == 0.0, 0.0, out)


def denormalize(y: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize` on [-1, 1]; out-of-range inputs are clipped first."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != stats.dim:
        raise ValidationError(f"input dim {y.shape[-1]} != stats dim {stats.dim}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("denormalize: input has non-finite components")
    span = stats.q_high - stats.q_low
    clipped = np.clip(y, -1.0, 1.0)
    return stats.q_low + (clipped + 1.0) * 0.5 * span
