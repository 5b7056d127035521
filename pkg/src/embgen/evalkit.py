"""Evaluation-set construction and the cosine/WER/CER metric suite.

The suite scores a generator along four axes: diversity (average pairwise
cosine inside a set, where higher similarity means lower diversity), coverage
and distribution fidelity (pairwise cosine across sets), speaker fidelity
(cosine over matched utterance pairs), and stability (consistency of one
generated speaker across conversions from different source speakers), with
natural within-speaker variation as the reference point. Intelligibility is
scored by word and character error rates from a minimum-edit-distance
alignment against reference transcripts.

Metrics consume embedding tables and transcript pairs from files, so any
conversion or recognition system can feed them; a noise-perturbing stub
backend stands in for real voice conversion in offline runs.
"""

from __future__ import annotations

import json
import string
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .errors import ParseError, ValidationError
from .store import EmbeddingDataset, EmbeddingRecord

ROW_ORDER = [
    "original_diversity",
    "generated_diversity",
    "original_coverage",
    "distribution_fidelity",
    "speaker_fidelity_syn",
    "speaker_fidelity_recon",
    "stability",
    "natural_consistency",
]

ROW_LABELS = {
    "original_diversity": "Pairwise(S_syn, S_syn), Original Diversity",
    "generated_diversity": "Pairwise(G_syn, G_syn), Generated Diversity",
    "original_coverage": "Pairwise(G_syn, S_syn), Original Coverage",
    "distribution_fidelity": "Pairwise(S_syn, GT), Distribution Fidelity",
    "speaker_fidelity_syn": "Corresponding(S_syn, GT), Speaker Fidelity",
    "speaker_fidelity_recon": "Corresponding(S_recon, GT), Speaker Fidelity",
    "stability": "Stability",
    "natural_consistency": "Natural Consistency",
}


@dataclass(frozen=True)
class EvalConfig:
    m: int = 1000
    seed: int = 0
    pairwise_sample_cap: int | None = None

    def __post_init__(self):
        if self.m < 2:
            raise ValidationError("m must be >= 2")
        if self.pairwise_sample_cap is not None and self.pairwise_sample_cap < 1:
            raise ValidationError("pairwise_sample_cap must be >= 1 when set")


@dataclass
class EvalSets:
    """The measurement sets; rows of the synthesized sets carry gt utterance ids."""

    gt: EmbeddingDataset
    gt_same_speaker: EmbeddingDataset
    s_syn: EmbeddingDataset | None = None
    s_recon: EmbeddingDataset | None = None
    g_syn: EmbeddingDataset | None = None
    g_syn_join: dict[str, list[int]] | None = None


@dataclass(frozen=True)
class MetricStat:
    mean: float
    std: float
    pair_count: int


@dataclass
class SimilarityReport:
    metrics: dict[str, MetricStat] = field(default_factory=dict)
    omitted: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "metrics": [
                {
                    "name": name,
                    "label": ROW_LABELS.get(name, name),
                    "mean": stat.mean,
                    "std": stat.std,
                    "pair_count": stat.pair_count,
                }
                for name, stat in self.metrics.items()
            ],
            "omitted": list(self.omitted),
        }

    def render_text(self) -> str:
        """Aligned table, one metric per row."""
        rows = [("metric", "mean", "std", "pairs")]
        for name in ROW_ORDER:
            if name in self.metrics:
                stat = self.metrics[name]
                rows.append((ROW_LABELS[name], f"{stat.mean:.4f}",
                             f"{stat.std:.4f}", str(stat.pair_count)))
        widths = [max(len(r[c]) for r in rows) for c in range(4)]
        lines = []
        for r in rows:
            lines.append("  ".join(r[c].ljust(widths[c]) if c == 0 else r[c].rjust(widths[c])
                                   for c in range(4)))
        if self.omitted:
            lines.append("")
            lines.append("omitted (missing inputs): " + ", ".join(self.omitted))
        return "\n".join(lines)


@dataclass(frozen=True)
class TranscriptPair:
    reference: str
    hypothesis: str


# ---------------------------------------------------------------------------
# cosine machinery

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a| |b|); rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine is undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(data: EmbeddingDataset) -> np.ndarray:
    matrix = data.matrix().astype(np.float64)
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0.0):
        bad = data.records[int(np.argmin(norms))].utterance_id
        raise ValidationError(f"zero vector in dataset (utterance {bad!r})")
    return matrix / norms[:, None]


def _same_dataset(a: EmbeddingDataset, b: EmbeddingDataset) -> bool:
    if a is b:
        return True
    return (
        len(a) == len(b)
        and a.utterance_ids() == b.utterance_ids()
        and np.array_equal(a.matrix(), b.matrix())
    )


def _finalize(values: np.ndarray) -> MetricStat:
    if values.size == 0:
        raise ValidationError("no eligible pairs")
    return MetricStat(mean=float(values.mean()), std=float(values.std()),
                      pair_count=int(values.size))


def pairwise_similarity(
    set_a: EmbeddingDataset,
    set_b: EmbeddingDataset,
    exclude_same_utterance: bool = False,
    sample_cap: int | None = None,
    seed: int = 0,
) -> MetricStat:
    """Average cosine over all distinct pairs.

    Same set: unordered distinct index pairs, C(n, 2) of them. Different sets:
    the full cross product, optionally excluding pairs that share an utterance
    id. A sample cap subsamples pairs uniformly (seeded) when the pair count
    exceeds it.
    """
    if set_a.dim != set_b.dim:
        raise ValidationError(f"dimension mismatch: {set_a.dim} vs {set_b.dim}")
    if _same_dataset(set_a, set_b):
        unit = _unit_rows(set_a)
        sims = unit @ unit.T
        rows, cols = np.triu_indices(len(set_a), k=1)
    else:
        sims = _unit_rows(set_a) @ _unit_rows(set_b).T
        if exclude_same_utterance:
            ids_b = {u: j for j, u in enumerate(set_b.utterance_ids())}
            mask = np.ones(sims.shape, dtype=bool)
            for i, u in enumerate(set_a.utterance_ids()):
                j = ids_b.get(u)
                if j is not None:
                    mask[i, j] = False
            rows, cols = np.nonzero(mask)
        else:
            rows, cols = np.nonzero(np.ones(sims.shape, dtype=bool))
    if sample_cap is not None and rows.size > sample_cap:
        pick = np.random.default_rng(seed).choice(rows.size, size=sample_cap, replace=False)
        rows, cols = rows[pick], cols[pick]
    return _finalize(sims[rows, cols])


def corresponding_similarity(set_a: EmbeddingDataset, set_b: EmbeddingDataset) -> MetricStat:
    """Average cosine over pairs joined by utterance id."""
    if set_a.dim != set_b.dim:
        raise ValidationError(f"dimension mismatch: {set_a.dim} vs {set_b.dim}")
    lookup = {rec.utterance_id: rec for rec in set_b.records}
    values = [
        cosine(rec.vector, lookup[rec.utterance_id].vector)
        for rec in set_a.records
        if rec.utterance_id in lookup
    ]
    if not values:
        raise ValidationError("the sets share no utterance ids")
    return _finalize(np.asarray(values))


def stability(
    g_syn: EmbeddingDataset,
    join: Mapping[str, list[int]],
    source_speakers: Mapping[str, str],
) -> MetricStat:
    """Within-generated-speaker cosine across conversions from different sources.

    ``join`` maps generated speaker id -> row indices into g_syn;
    ``source_speakers`` maps a row's utterance id to its natural source speaker.
    Pairs whose source speakers coincide are excluded.
    """
    values = []
    for gen_id, rows in join.items():
        for r in rows:
            if not 0 <= r < len(g_syn):
                raise ValidationError(f"join for {gen_id!r} references row {r} out of range")
        for a in range(len(rows)):
            for b in range(a + 1, len(rows)):
                rec_a, rec_b = g_syn.records[rows[a]], g_syn.records[rows[b]]
                src_a = source_speakers.get(rec_a.utterance_id)
                src_b = source_speakers.get(rec_b.utterance_id)
                if src_a is None or src_b is None:
                    raise ValidationError(
                        f"missing source speaker for {rec_a.utterance_id!r} or {rec_b.utterance_id!r}"
                    )
                if src_a == src_b:
                    continue
                values.append(cosine(rec_a.vector, rec_b.vector))
    if not values:
        raise ValidationError("no generated speaker has conversions from two distinct sources")
    return _finalize(np.asarray(values))


def natural_consistency(data: EmbeddingDataset, config: EvalConfig) -> MetricStat:
    """Within-speaker cosine over distinct utterances.

    Exhaustive when the pair count is at most config.m, otherwise config.m
    pairs subsampled uniformly without replacement (seeded).
    """
    index_of = {u: i for i, u in enumerate(data.utterance_ids())}
    pairs = []
    for utts in data.by_speaker().values():
        for a in range(len(utts)):
            for b in range(a + 1, len(utts)):
                pairs.append((index_of[utts[a]], index_of[utts[b]]))
    if not pairs:
        raise ValidationError("no speaker has at least 2 utterances")
    if len(pairs) > config.m:
        rng = np.random.default_rng(config.seed)
        keep = rng.choice(len(pairs), size=config.m, replace=False)
        pairs = [pairs[i] for i in keep]
    matrix = data.matrix().astype(np.float64)
    values = np.asarray([cosine(matrix[i], matrix[j]) for i, j in pairs])
    return _finalize(values)


# ---------------------------------------------------------------------------
# evaluation-set construction

def build_eval_sets(data: EmbeddingDataset, config: EvalConfig) -> EvalSets:
    """Sample m ground-truth utterances plus a same-speaker partner for each.

    Only speakers with >= 2 utterances are eligible. Partners are drawn
    uniformly from the speaker's other utterances via a per-speaker cyclic
    derangement, which keeps partner ids distinct within the set.
    """
    by_speaker = data.by_speaker()
    eligible_ids = [u for utts in by_speaker.values() if len(utts) >= 2 for u in utts]
    if len(eligible_ids) < config.m:
        raise ValidationError(
            f"need m={config.m} utterances from speakers with >= 2 utterances; "
            f"only {len(eligible_ids)} eligible"
        )
    rng = np.random.default_rng(config.seed)
    chosen = [eligible_ids[i] for i in rng.choice(len(eligible_ids), size=config.m, replace=False)]
    record_of = {rec.utterance_id: rec for rec in data.records}
    partner_of: dict[str, str] = {}
    for utts in by_speaker.values():
        if len(utts) < 2:
            continue
        perm = [utts[i] for i in rng.permutation(len(utts))]
        for pos, u in enumerate(perm):
            partner_of[u] = perm[(pos + 1) % len(perm)]
    gt_records = [record_of[u] for u in chosen]
    partner_records = [record_of[partner_of[u]] for u in chosen]
    gt = EmbeddingDataset(dim=data.dim, records=gt_records, source_tag="gt")
    gt_same = EmbeddingDataset(dim=data.dim, records=partner_records, source_tag="gt_same_speaker")
    for a, b in zip(gt.records, gt_same.records):
        assert a.speaker_id == b.speaker_id and a.utterance_id != b.utterance_id
    return EvalSets(gt=gt, gt_same_speaker=gt_same)


class ConversionBackend(Protocol):
    """Anything that renders a source utterance with a target speaker's embedding."""

    def convert(self, source: EmbeddingRecord, target_vector: np.ndarray,
                target_speaker_id: str) -> EmbeddingRecord: ...


def stub_convert(
    source: EmbeddingRecord,
    target_speaker: np.ndarray,
    target_speaker_id: str,
    noise_scale: float = 0.0,
    seed: int = 0,
) -> EmbeddingRecord:
    """Offline stand-in for a conversion system: target embedding plus noise.

    The noise stream is keyed on (seed, source utterance id), so conversion
    order never changes results.
    """
    target_speaker = np.asarray(target_speaker, dtype=np.float64)
    if target_speaker.shape != source.vector.shape:
        raise ValidationError("target vector dimension mismatch")
    rng = np.random.default_rng([seed, zlib.crc32(source.utterance_id.encode("utf-8"))])
    vec = target_speaker + noise_scale * rng.normal(size=target_speaker.shape)
    return EmbeddingRecord(source.utterance_id, target_speaker_id, vec.astype(np.float32))


@dataclass
class StubConversionBackend:
    noise_scale: float = 0.0
    seed: int = 0

    def convert(self, source: EmbeddingRecord, target_vector: np.ndarray,
                target_speaker_id: str) -> EmbeddingRecord:
        return stub_convert(source, target_vector, target_speaker_id,
                            noise_scale=self.noise_scale, seed=self.seed)


def convert_eval_sets(
    sets: EvalSets,
    backend: ConversionBackend,
    generated: EmbeddingDataset | None = None,
    reconstruct_fn=None,
    conversions_per_speaker: int = 4,
) -> EvalSets:
    """Populate s_syn, s_recon, and g_syn through a conversion backend.

    * s_syn: each gt utterance rendered with its same-speaker partner's embedding.
    * s_recon: each gt utterance rendered with its own embedding, or via
      ``reconstruct_fn(vector) -> vector`` when provided.
    * g_syn: gt utterances converted to generated speakers, round-robin, with
      ``conversions_per_speaker`` utterances per generated speaker; the join
      table records which rows belong to each generated speaker.
    """
    gt, gt_same = sets.gt, sets.gt_same_speaker
    s_syn_records = [
        backend.convert(gt.records[i], gt_same.records[i].vector, gt.records[i].speaker_id)
        for i in range(len(gt))
    ]
    if reconstruct_fn is not None:
        s_recon_records = [
            EmbeddingRecord(rec.utterance_id, rec.speaker_id,
                            np.asarray(reconstruct_fn(rec.vector), dtype=np.float32))
            for rec in gt.records
        ]
    else:
        s_recon_records = [
            backend.convert(rec, rec.vector, rec.speaker_id) for rec in gt.records
        ]
    sets.s_syn = EmbeddingDataset(dim=gt.dim, records=s_syn_records, source_tag="s_syn")
    sets.s_recon = EmbeddingDataset(dim=gt.dim, records=s_recon_records, source_tag="s_recon")
    if generated is not None:
        n_gen = max(1, min(len(generated), (len(gt) + conversions_per_speaker - 1)
                           // conversions_per_speaker))
        g_records, join = [], {}
        for i in range(len(gt)):
            gen_rec = generated.records[i % n_gen]
            g_records.append(backend.convert(gt.records[i], gen_rec.vector, gen_rec.speaker_id))
            join.setdefault(gen_rec.speaker_id, []).append(i)
        sets.g_syn = EmbeddingDataset(dim=gt.dim, records=g_records, source_tag="g_syn")
        sets.g_syn_join = join
    return sets


def assemble_report(
    sets: EvalSets,
    data: EmbeddingDataset | None,
    config: EvalConfig,
) -> SimilarityReport:
    """Compute every metric row whose inputs are present; list the rest as omitted."""
    report = SimilarityReport()
    cap, seed = config.pairwise_sample_cap, config.seed

    def pairwise(a, b, exclude=False):
        return pairwise_similarity(a, b, exclude_same_utterance=exclude,
                                   sample_cap=cap, seed=seed)

    recipes = {
        "original_diversity": (lambda: pairwise(sets.s_syn, sets.s_syn), [sets.s_syn]),
        "generated_diversity": (lambda: pairwise(sets.g_syn, sets.g_syn), [sets.g_syn]),
        "original_coverage": (lambda: pairwise(sets.g_syn, sets.s_syn),
                              [sets.g_syn, sets.s_syn]),
        "distribution_fidelity": (lambda: pairwise(sets.s_syn, sets.gt, exclude=True),
                                  [sets.s_syn, sets.gt]),
        "speaker_fidelity_syn": (lambda: corresponding_similarity(sets.s_syn, sets.gt),
                                 [sets.s_syn, sets.gt]),
        "speaker_fidelity_recon": (lambda: corresponding_similarity(sets.s_recon, sets.gt),
                                   [sets.s_recon, sets.gt]),
        "stability": (
            lambda: stability(
                sets.g_syn, sets.g_syn_join,
                {rec.utterance_id: rec.speaker_id for rec in sets.gt.records},
            ),
            [sets.g_syn, sets.g_syn_join],
        ),
        "natural_consistency": (lambda: natural_consistency(data, config), [data]),
    }
    for name in ROW_ORDER:
        fn, requirements = recipes[name]
        if any(req is None for req in requirements):
            report.omitted.append(name)
            continue
        report.metrics[name] = fn()
    if not report.metrics:
        raise ValidationError("every metric row is missing its inputs")
    return report


# ---------------------------------------------------------------------------
# WER / CER

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


def _edit_distance(ref: list, hyp: list) -> int:
    """Uniform-cost Levenshtein with a rolling row."""
    previous = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        current = [i]
        for j, h in enumerate(hyp, start=1):
            current.append(min(
                previous[j - 1] + (r != h),
                previous[j] + 1,
                current[-1] + 1,
            ))
        previous = current
    return previous[-1]


def wer(pair: TranscriptPair) -> float:
    """(substitutions + deletions + insertions) / reference words."""
    ref = normalize_text(pair.reference).split()
    if not ref:
        raise ValidationError("reference is empty after normalization")
    hyp = normalize_text(pair.hypothesis).split()
    return _edit_distance(ref, hyp) / len(ref)


def cer(pair: TranscriptPair) -> float:
    """Same formula at character level, spaces included."""
    ref = list(normalize_text(pair.reference))
    if not ref:
        raise ValidationError("reference is empty after normalization")
    hyp = list(normalize_text(pair.hypothesis))
    return _edit_distance(ref, hyp) / len(ref)


def error_rates(pairs: list[TranscriptPair]) -> dict:
    """Per-set averages of the per-utterance scores."""
    if not pairs:
        raise ValidationError("no transcript pairs given")
    wers = [wer(p) for p in pairs]
    cers = [cer(p) for p in pairs]
    return {
        "wer": float(np.mean(wers)),
        "cer": float(np.mean(cers)),
        "utterances": len(pairs),
    }


def load_transcripts(path: str | Path) -> list[TranscriptPair]:
    """JSONL with fields utterance_id, reference, hypothesis."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"transcript file not found: {path}")
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                pairs.append(TranscriptPair(obj["reference"], obj["hypothesis"]))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return pairs
