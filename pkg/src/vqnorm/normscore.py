"""Subject- and region-level normative scores from transformer likelihoods.

A subject's score is the summed log-likelihood of its latent token sequence;
the anomaly score is its negation (NLL). For region scores each latent cell's
log-likelihood is replicated over its ``factor**3`` voxel block and the median
over each atlas region is taken.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .artransformer import ARTransformer, cohort_tokens
from .errors import ConfigError, ShapeError
from .synthcohort import Atlas, Cohort, SubjectRecord
from .vqvae import VQVAE

log = logging.getLogger(__name__)


@dataclass
class SubjectScore:
    subject_id: str
    per_position: np.ndarray
    latent_extents: tuple = ()

    @property
    def total(self) -> float:
        return float(self.per_position.sum())

    @property
    def nll(self) -> float:
        return -self.total


def check_paired(vqvae: VQVAE, transformer: ARTransformer) -> None:
    """Raise ConfigError unless the transformer was trained on this VQ-VAE's tokens."""
    k = vqvae.config.codebook_size
    if transformer.config.vocab_size != k + 1:
        raise ConfigError(f"transformer vocabulary {transformer.config.vocab_size} does not match "
                          f"codebook size {k} + BOS")
    paired = getattr(transformer, "paired_vqvae", None)
    if paired is not None and paired != vqvae.fingerprint():
        raise ConfigError(f"transformer was trained on VQ-VAE {paired}, "
                          f"not on the supplied VQ-VAE {vqvae.fingerprint()}")


def score_tokens(transformer: ARTransformer, tokens: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-position log-likelihoods (N, L) of raster token sequences."""
    return transformer.log_probs(np.asarray(tokens), batch_size)


def score_subject(volume, vqvae: VQVAE, transformer: ARTransformer, subject_id: str = "") -> SubjectScore:
    """Summed latent log-likelihood of one volume."""
    check_paired(vqvae, transformer)
    arr = volume.intensities if hasattr(volume, "intensities") else np.asarray(volume)
    subject_id = subject_id or getattr(volume, "subject_id", "")
    idx = vqvae.latent_indices(arr[None])
    lp = score_tokens(transformer, idx.reshape(1, -1))[0]
    return SubjectScore(subject_id, lp, tuple(idx.shape[1:]))


# ----------------------------------------------------------------- regions

def upsample_nearest(per_position: np.ndarray, latent_extents, factor: int) -> np.ndarray:
    """Replicate each latent cell over its factor^3 voxel block."""
    grid = np.asarray(per_position).reshape(latent_extents)
    for axis in range(3):
        grid = np.repeat(grid, factor, axis=axis)
    return grid


def cell_region_counts(atlas: Atlas, latent_extents, factor: int) -> np.ndarray:
    """Voxel count of each region (rows 1..R) inside each latent cell, (R, n_cells)."""
    expected = tuple(int(e) * factor for e in latent_extents)
    if tuple(atlas.extents) != expected:
        raise ShapeError(f"atlas extents {tuple(atlas.extents)} != latent extents "
                         f"{tuple(latent_extents)} x factor {factor}")
    cell = np.arange(int(np.prod(latent_extents))).reshape(latent_extents)
    cell_of_voxel = upsample_nearest(cell, latent_extents, factor).ravel()
    n_cells = cell.size
    flat = atlas.labels.ravel().astype(np.int64) * n_cells + cell_of_voxel
    counts = np.bincount(flat, minlength=(atlas.n_regions + 1) * n_cells)
    return counts.reshape(atlas.n_regions + 1, n_cells)[1:]


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Median of ``values`` each repeated ``weights`` times (numpy.median semantics)."""
    keep = weights > 0
    v, w = values[keep], weights[keep]
    n = int(w.sum())
    if n == 0:
        return float("nan")
    order = np.argsort(v, kind="mergesort")
    v, cum = v[order], np.cumsum(w[order])
    lo = v[np.searchsorted(cum, (n - 1) // 2, side="right")]
    hi = v[np.searchsorted(cum, n // 2, side="right")]
    return float((lo + hi) / 2.0)


def region_loglik(per_position, latent_extents, atlas: Atlas, factor: int,
                  counts: Optional[np.ndarray] = None) -> np.ndarray:
    """Median upsampled log-likelihood per region, a length-R row.

    Computed from per-cell voxel counts, which equals the median over the
    nearest-neighbour upsampled voxel map.
    """
    lp = np.asarray(per_position, dtype=np.float64).ravel()
    n_cells = int(np.prod(latent_extents))
    if lp.size != n_cells:
        raise ShapeError(f"{lp.size} per-position values for a latent grid of {n_cells} cells")
    if counts is None:
        counts = cell_region_counts(atlas, latent_extents, factor)
    return np.array([weighted_median(lp, c) for c in counts])


# ------------------------------------------------------------------ cohort

@dataclass
class CohortScores:
    """Per-subject totals and the subject x region median table, sorted by subject id."""
    records: List[SubjectRecord] = field(default_factory=list)
    scores: List[SubjectScore] = field(default_factory=list)
    regions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    region_ids: List[int] = field(default_factory=list)
    region_names: List[str] = field(default_factory=list)

    @property
    def nll(self) -> np.ndarray:
        return np.array([s.nll for s in self.scores])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    @property
    def subject_ids(self) -> List[str]:
        return [r.subject_id for r in self.records]

    def scores_tsv(self) -> str:
        return scores_table(
            "transformer", self.records, [s.nll for s in self.scores],
            signed=[float("nan")] * len(self.scores), total=[s.total for s in self.scores])

    def regions_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("subject_id\t" + "\t".join(self.region_names) + "\n")
        for rec, row in zip(self.records, self.regions):
            buf.write(rec.subject_id + "\t" + "\t".join(_fmt(v) for v in row) + "\n")
        return buf.getvalue()


SCORE_COLUMNS = ("method", "subject_id", "diagnosis", "age", "sex", "total_loglik", "nll", "score", "signed_score")


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def scores_table(method: str, records: Sequence[SubjectRecord], scores, signed=None, total=None,
                 header: bool = True) -> str:
    """Rows of the shared scores schema; ``score`` is anomaly-increasing.

    For the transformer ``score`` is the NLL; ``signed_score`` carries the
    signed mean z of the region baselines and is nan elsewhere.
    """
    n = len(records)
    signed = [float("nan")] * n if signed is None else list(signed)
    total = [float("nan")] * n if total is None else list(total)
    buf = io.StringIO()
    if header:
        buf.write("\t".join(SCORE_COLUMNS) + "\n")
    for rec, s, sg, t in zip(records, scores, signed, total):
        nll = -t if not math.isnan(t) else float("nan")
        buf.write("\t".join([method, rec.subject_id, rec.diagnosis, f"{rec.age:.3f}", rec.sex,
                             _fmt(t), _fmt(nll), _fmt(s), _fmt(sg)]) + "\n")
    return buf.getvalue()


def read_scores(text: str) -> dict:
    """Parse a scores file into ``{method: {column: list}}``."""
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        return {}
    cols = lines[0].split("\t")
    out: dict = {}
    for ln in lines[1:]:
        row = dict(zip(cols, ln.split("\t")))
        m = out.setdefault(row["method"], {c: [] for c in cols})
        for c in cols:
            m[c].append(row[c])
    return out


def score_cohort(cohort: Cohort, vqvae: VQVAE, transformer: ARTransformer, atlas: Optional[Atlas] = None,
                 batch_size: int = 16) -> CohortScores:
    """Score every subject of a cohort.

    Volumes are materialised (or loaded) in batches; subjects are processed in
    sorted id order so outputs do not depend on manifest order.
    """
    check_paired(vqvae, transformer)
    atlas = atlas if atlas is not None else cohort.atlas
    ids = [f"region_{r:03d}" for r in range(1, atlas.n_regions + 1)] if not atlas.names else list(atlas.names)
    result = CohortScores(region_ids=list(range(1, atlas.n_regions + 1)), region_names=ids)
    records = sorted(cohort.records, key=lambda r: r.subject_id)
    if not records:
        log.warning("empty cohort: nothing to score")
        result.regions = np.zeros((0, atlas.n_regions))
        return result
    factor = vqvae.config.factor
    latent = vqvae.config.latent_extents(atlas.extents)
    counts = cell_region_counts(atlas, latent, factor)
    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        vols = np.stack([cohort.volume(r).intensities for r in chunk])
        lp = score_tokens(transformer, cohort_tokens(vqvae, vols, batch_size))
        for rec, row in zip(chunk, lp):
            result.scores.append(SubjectScore(rec.subject_id, row, latent))
            rows.append(region_loglik(row, latent, atlas, factor, counts))
    result.records = records
    result.regions = np.array(rows)
    return result
