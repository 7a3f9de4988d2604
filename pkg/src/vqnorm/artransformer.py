"""Decoder-only transformer over raster-ordered latent token sequences.

The vocabulary is the VQ-VAE codebook plus one begin-of-sequence token, so
every real token, including the first, gets a conditional probability
p(s_i | s_<i). Blocks are pre-norm with causal multi-head self-attention and
a GELU feed-forward layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad as nd
from .ndgrad import functional as F
from .ndgrad import Tensor
from .synthcohort import config_hash
from .errors import ConfigError, ContractError
from .vqvae import params_fingerprint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransformerConfig:
    vocab_size: int = 33
    max_len: int = 65
    layers: int = 4
    heads: int = 4
    width: int = 64
    ff_mult: int = 4
    dropout: float = 0.3

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")

    @property
    def bos(self) -> int:
        return self.vocab_size - 1

    def hash(self) -> str:
        return config_hash(self)


@dataclass(frozen=True)
class ArTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.9999
    holdout: int = 32
    seed: int = 0


@dataclass
class TokenSequence:
    tokens: np.ndarray
    extents: Tuple[int, int, int]
    subject_id: str = ""


@dataclass
class PositionLogLik:
    values: np.ndarray

    @property
    def total(self) -> float:
        return float(self.values.sum())


# ------------------------------------------------------------ raster scan

def raster_flatten(grid: np.ndarray, subject_id: str = "") -> TokenSequence:
    """Row-major flattening: last axis fastest."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"latent grid must be 3-d, got shape {grid.shape}")
    return TokenSequence(np.ascontiguousarray(grid).reshape(-1).astype(np.int64), tuple(grid.shape), subject_id)


def raster_unflatten(seq: TokenSequence) -> np.ndarray:
    return np.asarray(seq.tokens).reshape(seq.extents)


# ------------------------------------------------------------------ model

class ARTransformer:
    """Causal transformer; named parameters live in ``self.params``."""

    def __init__(self, config: TransformerConfig = TransformerConfig(), seed: int = 0):
        self.config = config
        dt = nd.get_dtype()
        rng = np.random.default_rng(seed)
        w, v, ff = config.width, config.vocab_size, config.width * config.ff_mult
        std = 0.02
        resid_std = std / math.sqrt(2 * config.layers)
        p: Dict[str, Tensor] = {}

        def add(name, arr):
            p[name] = nd.parameter(np.asarray(arr, dtype=dt), name)

        add("tok_emb", rng.normal(0, std, (v, w)))
        add("pos_emb", rng.normal(0, std, (config.max_len, w)))
        for i in range(config.layers):
            b = f"block{i}"
            add(f"{b}.ln1.g", np.ones(w))
            add(f"{b}.ln1.b", np.zeros(w))
            add(f"{b}.attn.qkv.w", rng.normal(0, std, (w, 3 * w)))
            add(f"{b}.attn.qkv.b", np.zeros(3 * w))
            add(f"{b}.attn.out.w", rng.normal(0, resid_std, (w, w)))
            add(f"{b}.attn.out.b", np.zeros(w))
            add(f"{b}.ln2.g", np.ones(w))
            add(f"{b}.ln2.b", np.zeros(w))
            add(f"{b}.ff.in.w", rng.normal(0, std, (w, ff)))
            add(f"{b}.ff.in.b", np.zeros(ff))
            add(f"{b}.ff.out.w", rng.normal(0, resid_std, (ff, w)))
            add(f"{b}.ff.out.b", np.zeros(w))
        add("ln_f.g", np.ones(w))
        add("ln_f.b", np.zeros(w))
        add("head.w", rng.normal(0, std, (w, v)))
        add("head.b", np.zeros(v))
        self.params = p
        self.last_attention: List[np.ndarray] = []
        # fingerprint of the VQ-VAE whose tokens this model was trained on
        self.paired_vqvae: Optional[str] = None

    def _attention(self, x: Tensor, prefix: str, training: bool, rng) -> Tensor:
        cfg = self.config
        bsz, t, w = x.shape
        h, dh = cfg.heads, w // cfg.heads
        qkv = nd.linear(x, self.params[f"{prefix}.qkv.w"], self.params[f"{prefix}.qkv.b"])
        qkv = F.transpose(F.reshape(qkv, (bsz, t, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, B, h, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = nd.matmul(q, F.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        future = np.triu(np.ones((t, t), dtype=bool), k=1)
        weights = nd.softmax(F.masked_fill(scores, future, -np.inf), axis=-1)
        self.last_attention.append(weights.data)
        weights = nd.dropout(weights, cfg.dropout, training, rng)
        ctx = F.reshape(F.transpose(nd.matmul(weights, v), (0, 2, 1, 3)), (bsz, t, w))
        return nd.linear(ctx, self.params[f"{prefix}.out.w"], self.params[f"{prefix}.out.b"])

    def causal_forward(self, tokens, training: bool = False, rng=None) -> Tensor:
        """Logits (B, T, vocab) for token ids (B, T) that already start with BOS."""
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        t = tokens.shape[1]
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        if t == 0:
            raise ValueError("empty token sequence")
        self.last_attention = []
        p = self.params
        x = nd.embedding(p["tok_emb"], tokens) + p["pos_emb"][:t]
        x = nd.dropout(x, cfg.dropout, training, rng)
        for i in range(cfg.layers):
            b = f"block{i}"
            a = self._attention(nd.layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"]), f"{b}.attn", training, rng)
            x = x + nd.dropout(a, cfg.dropout, training, rng)
            hdn = nd.gelu(nd.linear(nd.layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"]),
                                    p[f"{b}.ff.in.w"], p[f"{b}.ff.in.b"]))
            hdn = nd.linear(hdn, p[f"{b}.ff.out.w"], p[f"{b}.ff.out.b"])
            x = x + nd.dropout(hdn, cfg.dropout, training, rng)
        x = nd.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return nd.linear(x, p["head.w"], p["head.b"])

    def _with_bos(self, seqs: np.ndarray) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs[None]
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.config.bos):
            raise IndexError(f"token ids must lie in [0, {self.config.bos})")
        if seqs.shape[1] + 1 > self.config.max_len:
            raise ValueError(f"sequence length {seqs.shape[1]} + BOS exceeds max_len {self.config.max_len}")
        bos = np.full((seqs.shape[0], 1), self.config.bos, dtype=np.int64)
        # the last real token is never an input, only a target
        return np.concatenate([bos, seqs[:, :-1]], axis=1)

    def loss(self, seqs: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Mean per-token negative log-likelihood of a batch (B, L)."""
        logits = self.causal_forward(self._with_bos(seqs), training, rng)
        return nd.cross_entropy(logits, np.asarray(seqs, dtype=np.int64).reshape(logits.shape[:2]))

    def fingerprint(self) -> str:
        return params_fingerprint(self.params, self.config.hash())

    def log_probs(self, seqs: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Teacher-forced log p(s_i | s_<i) for every position, shape (B, L)."""
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs[None]
        out = []
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            logits = self.causal_forward(self._with_bos(chunk)).data.astype(np.float64)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            out.append(np.take_along_axis(logp, chunk[..., None], axis=-1)[..., 0])
        if not out:
            return np.zeros((0, seqs.shape[1]))
        return np.concatenate(out)


def sequence_nll(model: ARTransformer, sequence) -> PositionLogLik:
    """Per-position log-likelihood of one observed sequence (all entries <= 0)."""
    tokens = sequence.tokens if isinstance(sequence, TokenSequence) else np.asarray(sequence)
    return PositionLogLik(model.log_probs(tokens[None])[0])


@dataclass
class ArHistory:
    epochs: List[dict] = field(default_factory=list)

    def series(self, key: str) -> List[float]:
        return [e[key] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def cohort_tokens(vqvae, volumes, batch_size: int = 16) -> np.ndarray:
    """Encode, quantize and raster-flatten each volume: (N, d1*d2*d3)."""
    idx = vqvae.latent_indices(volumes, batch_size)
    return idx.reshape(len(idx), -1)


def train_transformer(vqvae, volumes, config: Optional[TransformerConfig] = None,
                      train: ArTrainConfig = ArTrainConfig(), val_volumes=None,
                      tokens: Optional[np.ndarray] = None, callback=None):
    """Fit the transformer on token sequences of healthy volumes.

    Tokens are derived once per subject with the (frozen) VQ-VAE. When
    ``tokens`` is given, ``volumes`` is ignored and the last ``train.holdout``
    sequences are held out.

    Returns:
        (model, history) with per-epoch train and held-out mean NLL per token.
    """
    k = vqvae.config.codebook_size
    if tokens is None:
        from .synthcohort import Cohort
        if isinstance(volumes, Cohort):
            volumes = volumes.volumes()
        tokens = cohort_tokens(vqvae, volumes)
    seq_len = tokens.shape[1]
    if config is None:
        config = TransformerConfig(vocab_size=k + 1, max_len=seq_len + 1)
    if config.vocab_size != k + 1:
        raise ConfigError(f"transformer vocabulary {config.vocab_size} != codebook size {k} + 1")
    if config.max_len < seq_len + 1:
        raise ConfigError(f"max_len {config.max_len} too short for sequences of length {seq_len}")
    if len(tokens) == 0:
        raise ContractError("cannot train on an empty cohort")
    val_tokens = None
    if val_volumes is not None:
        val_tokens = cohort_tokens(vqvae, val_volumes)
    elif len(tokens) > 2 * train.holdout > 0:
        tokens, val_tokens = tokens[:-train.holdout], tokens[-train.holdout:]
    rng = np.random.default_rng(train.seed)
    model = ARTransformer(config, seed=int(rng.integers(2 ** 31)))
    model.paired_vqvae = vqvae.fingerprint()
    opt = nd.Adam(model.params, lr=train.lr, decay=train.lr_decay)
    history = ArHistory()
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(len(tokens))
        total, batches = 0.0, 0
        for start in range(0, len(order), train.batch_size):
            batch = tokens[np.sort(order[start:start + train.batch_size])]
            opt.zero_grad()
            loss = model.loss(batch, training=True, rng=rng)
            nd.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        rec = {"epoch": epoch, "train_nll": total / batches}
        if val_tokens is not None and len(val_tokens):
            rec["val_nll"] = float(-model.log_probs(val_tokens).mean())
        history.epochs.append(rec)
        log.info("transformer epoch %d %s", epoch, rec)
        if callback is not None:
            callback(rec)
    return model, history
