"""3D VQ-VAE: strided-conv encoder, nearest-neighbour codebook, transposed-conv decoder.

Loss (van den Oord et al. 2017 formulation):

    mse(x, x_hat) + mse(z_q, sg(z_e)) + beta * mse(z_e, sg(z_q))

with straight-through gradients from the decoder input to ``z_e``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ndgrad as nd
from .ndgrad import functional as F
from .ndgrad import Tensor
from .errors import ConfigError, ContractError
from .synthcohort import Cohort, config_hash

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VqVaeConfig:
    factor: int = 8
    residual_blocks: int = 3
    channels: int = 32
    residual_channels: int = 16
    codebook_size: int = 32
    embedding_dim: int = 16
    beta: float = 0.25
    dropout: float = 0.1
    in_channels: int = 1

    def __post_init__(self):
        f = self.factor
        if f < 2 or f & (f - 1):
            raise ConfigError(f"factor must be a power of 2 >= 2, got {f}")
        if self.residual_blocks != self.n_stages:
            raise ConfigError(
                f"residual_blocks ({self.residual_blocks}) must equal log2(factor) ({self.n_stages}); "
                "one residual block follows each downsampling stage")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.factor)))

    def latent_extents(self, extents) -> tuple:
        bad = [e for e in extents if e % self.factor]
        if bad:
            raise nd.ShapeError(f"volume extents {tuple(extents)} not divisible by factor {self.factor}")
        return tuple(e // self.factor for e in extents)

    def hash(self) -> str:
        return config_hash(self)


@dataclass(frozen=True)
class VqTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.9999
    holdout: int = 32
    seed: int = 0
    restart_dead_codes: bool = True


@dataclass
class Codebook:
    embeddings: Tensor
    usage: np.ndarray

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def params_fingerprint(params: Dict[str, Tensor], salt: str = "") -> str:
    h = hashlib.sha256(salt.encode())
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def _he(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain * math.sqrt(2.0 / fan_in), size=shape).astype(nd.get_dtype())


class VQVAE:
    """Encoder/quantizer/decoder with named parameters in ``self.params``."""

    def __init__(self, config: VqVaeConfig = VqVaeConfig(), seed: int = 0):
        self.config = config
        dt = nd.get_dtype()
        rng = np.random.default_rng(seed)
        c, r, n = config.channels, config.residual_channels, config.embedding_dim
        p: Dict[str, Tensor] = {}

        def conv(name, cout, cin, k, gain=1.0):
            p[f"{name}.w"] = nd.parameter(_he(rng, (cout, cin, k, k, k), cin * k ** 3, gain), f"{name}.w")
            p[f"{name}.b"] = nd.parameter(np.zeros(cout, dtype=dt), f"{name}.b")

        def convt(name, cin, cout, k, gain=1.0):
            # each output voxel receives (k/stride)^3 * cin contributions
            p[f"{name}.w"] = nd.parameter(_he(rng, (cin, cout, k, k, k), cin * (k // 2) ** 3, gain), f"{name}.w")
            p[f"{name}.b"] = nd.parameter(np.zeros(cout, dtype=dt), f"{name}.b")

        def res(name):
            conv(f"{name}.conv3", r, c, 3)
            # small residual branches keep the stacked blocks near identity at init
            conv(f"{name}.conv1", c, r, 1, gain=0.1)

        for s in range(config.n_stages):
            conv(f"enc.down{s}", c, config.in_channels if s == 0 else c, 4)
            res(f"enc.res{s}")
        conv("enc.proj", n, c, 1)
        conv("dec.proj", c, n, 1)
        for s in range(config.n_stages):
            res(f"dec.res{s}")
            last = s == config.n_stages - 1
            convt(f"dec.up{s}", c, config.in_channels if last else c, 4, gain=0.1 if last else 1.0)
        k = config.codebook_size
        p["codebook"] = nd.parameter(rng.uniform(-1.0 / k, 1.0 / k, size=(k, n)).astype(dt), "codebook")
        self.params = p
        self.usage = np.zeros(k, dtype=np.int64)

    # ------------------------------------------------------------- pieces

    def fingerprint(self) -> str:
        """Short sha256 over config and parameter bytes; pairs checkpoints."""
        return params_fingerprint(self.params, self.config.hash())

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.params["codebook"], self.usage)

    def _conv(self, name, x, stride=1, padding=0):
        return nd.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride, padding)

    def _res(self, name, x, training, rng):
        h = self._conv(f"{name}.conv3", nd.relu(x), padding=1)
        h = nd.dropout(nd.relu(h), self.config.dropout, training, rng)
        return x + self._conv(f"{name}.conv1", h)

    def _as_input(self, volumes) -> Tensor:
        x = volumes.data if isinstance(volumes, Tensor) else np.asarray(volumes)
        if x.ndim == 3:
            x = x[None]
        if x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise nd.ShapeError(f"expected volumes (N, D, H, W), got {x.shape}")
        self.config.latent_extents(x.shape[2:])
        if isinstance(volumes, Tensor) and volumes.data.shape == x.shape:
            return volumes
        return Tensor(np.ascontiguousarray(x, dtype=nd.get_dtype()))

    def encode(self, volumes, training: bool = False, rng=None) -> Tensor:
        """Continuous latent z_e of shape (N, n, D/f, H/f, W/f)."""
        h = self._as_input(volumes)
        for s in range(self.config.n_stages):
            h = nd.relu(self._conv(f"enc.down{s}", h, stride=2, padding=1))
            h = self._res(f"enc.res{s}", h, training, rng)
        return self._conv("enc.proj", nd.relu(h))

    def quantize(self, z_e: Tensor) -> Tuple[np.ndarray, Tensor]:
        """Snap each latent cell to its nearest codebook row.

        Returns:
            (indices of shape (N, d1, d2, d3), z_q with z_e's shape). ``z_q``
            is differentiable w.r.t. the codebook only.
        """
        n = self.config.embedding_dim
        if z_e.shape[1] != n:
            raise nd.ShapeError(f"latent has {z_e.shape[1]} channels, codebook dim is {n}")
        idx = nearest_codes(z_e.data, self.params["codebook"].data)
        z_q = nd.embedding(self.params["codebook"], idx)          # (N, d1, d2, d3, n)
        return idx, F.transpose(z_q, (0, 4, 1, 2, 3))

    def decode(self, z_q) -> Tensor:
        """Reconstruction of shape (N, 1, D, H, W) from (N, n, d1, d2, d3)."""
        z_q = z_q if isinstance(z_q, Tensor) else Tensor(np.asarray(z_q, dtype=nd.get_dtype()))
        if z_q.ndim != 5 or z_q.shape[1] != self.config.embedding_dim:
            raise nd.ShapeError(f"decode expects (N, {self.config.embedding_dim}, d1, d2, d3), got {z_q.shape}")
        return self._decode(z_q, False, None)

    def _decode(self, z, training, rng):
        h = self._conv("dec.proj", z)
        last = self.config.n_stages - 1
        for s in range(self.config.n_stages):
            h = self._res(f"dec.res{s}", h, training, rng)
            h = nd.conv3d_transpose(nd.relu(h), self.params[f"dec.up{s}.w"], self.params[f"dec.up{s}.b"],
                                    stride=2, padding=1)
            if s != last:
                h = nd.relu(h)
        return h

    def forward(self, volumes, training: bool = False, rng=None):
        """Full pass; returns (x, x_hat, z_e, z_q, indices)."""
        x = self._as_input(volumes)
        z_e = self.encode(x, training, rng)
        idx, z_q = self.quantize(z_e)
        x_hat = self._decode(F.straight_through(z_e, z_q), training, rng)
        return x, x_hat, z_e, z_q, idx

    def loss(self, volumes, training: bool = False, rng=None):
        x, x_hat, z_e, z_q, idx = self.forward(volumes, training, rng)
        total, parts = vqvae_loss(x, x_hat, z_e, z_q, self.config.beta)
        return total, parts, idx

    # ---------------------------------------------------------- inference

    def latent_indices(self, volumes, batch_size: int = 16) -> np.ndarray:
        """Codebook index grid per volume, shape (N, d1, d2, d3)."""
        vols = np.asarray(volumes)
        if vols.ndim == 3:
            vols = vols[None]
        out = [self.quantize(self.encode(vols[i:i + batch_size]))[0]
               for i in range(0, len(vols), batch_size)]
        if not out:
            return np.zeros((0,) + self.config.latent_extents(vols.shape[1:]), dtype=np.int64)
        return np.concatenate(out)

    def reconstruct(self, volumes, batch_size: int = 16) -> np.ndarray:
        vols = np.asarray(volumes)
        outs = []
        for i in range(0, len(vols), batch_size):
            _, x_hat, *_ = self.forward(vols[i:i + batch_size])
            outs.append(x_hat.data[:, 0])
        return np.concatenate(outs)

    def reconstruction_mse(self, volumes, batch_size: int = 16) -> float:
        vols = np.asarray(volumes)
        if len(vols) == 0:
            return float("nan")
        total = 0.0
        for i in range(0, len(vols), batch_size):
            chunk = vols[i:i + batch_size]
            _, x_hat, *_ = self.forward(chunk)
            total += float(((x_hat.data[:, 0].astype(np.float64) - chunk) ** 2).sum())
        return total / vols.size


def nearest_codes(z_e: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Argmin squared distance per cell (ties to the lowest index).

    Args:
        z_e: (N, n, d1, d2, d3) latents.
        codebook: (K, n).
    """
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    flat = np.moveaxis(z_e, 1, -1)
    d2 = ((flat[..., None, :] - codebook) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def vqvae_loss(x: Tensor, x_hat: Tensor, z_e: Tensor, z_q: Tensor, beta: float):
    """Total loss and its components (all means over elements)."""
    recon = nd.mse(x_hat, F.stop_gradient(x))
    codebook = nd.mse(z_q, F.stop_gradient(z_e))
    commit = nd.mse(z_e, F.stop_gradient(z_q))
    total = recon + codebook
    if beta:
        total = total + beta * commit
    parts = {"reconstruction": recon.item(), "codebook": codebook.item(),
             "commitment": beta * commit.item(), "total": total.item()}
    return total, parts


def usage_entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def codebook_usage(model: VQVAE, volumes, batch_size: int = 16) -> dict:
    """Histogram of code indices over all latent cells of all volumes."""
    if isinstance(volumes, Cohort):
        volumes = volumes.volumes()
    idx = model.latent_indices(volumes, batch_size)
    counts = np.bincount(idx.ravel(), minlength=model.config.codebook_size)
    return {
        "counts": counts,
        "unused_fraction": float((counts == 0).mean()),
        "used_fraction": float((counts > 0).mean()),
        "entropy": usage_entropy(counts),
    }


def _init_codebook_from_data(model: VQVAE, volumes: np.ndarray, rng: np.random.Generator) -> None:
    """Seed codebook rows with distinct encoder outputs of a sample batch."""
    z = model.encode(volumes).data
    flat = np.moveaxis(z, 1, -1).reshape(-1, z.shape[1])
    uniq = np.unique(flat, axis=0)
    k = model.config.codebook_size
    if len(uniq) < k:
        return
    pick = rng.choice(len(uniq), size=k, replace=False)
    rows = uniq[np.sort(pick)].astype(nd.get_dtype())
    model.params["codebook"].data = rows
    rows.flags.writeable = False


def restart_dead_codes(model: VQVAE, counts: np.ndarray, z_e: np.ndarray, rng: np.random.Generator,
                       opt: Optional[nd.Adam] = None) -> int:
    """Move unused codebook rows onto randomly chosen recent encoder outputs.

    Returns:
        Number of rows restarted.
    """
    dead = np.flatnonzero(counts == 0)
    if dead.size == 0:
        return 0
    flat = np.moveaxis(z_e, 1, -1).reshape(-1, z_e.shape[1])
    pick = rng.choice(len(flat), size=dead.size, replace=dead.size > len(flat))
    rows = np.array(model.params["codebook"].data)
    rows[dead] = flat[pick]
    rows.flags.writeable = False
    model.params["codebook"].data = rows
    if opt is not None:
        opt.state.m["codebook"][dead] = 0.0
        opt.state.v["codebook"][dead] = 0.0
    return int(dead.size)


@dataclass
class TrainHistory:
    epochs: List[dict] = field(default_factory=list)

    def series(self, key: str) -> List[float]:
        return [e[key] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"epochs": self.epochs}


def train_vqvae(volumes, config: VqVaeConfig = VqVaeConfig(), train: VqTrainConfig = VqTrainConfig(),
                val_volumes=None, callback=None) -> Tuple[VQVAE, TrainHistory]:
    """Fit a VQ-VAE on healthy volumes.

    Args:
        volumes: (N, D, H, W) array or a training :class:`Cohort`.
        val_volumes: held-out healthy volumes; if None the last
            ``train.holdout`` volumes are held out (when enough remain).
        callback: optional ``f(epoch_record)`` for progress logging.

    Returns:
        The trained model and a per-epoch history with losses, held-out MSE
        and codebook usage.
    """
    if isinstance(volumes, Cohort):
        if volumes.split != "train":
            raise ContractError("VQ-VAE must be trained on the train split (controls only)")
        volumes = volumes.volumes()
    volumes = np.asarray(volumes)
    if len(volumes) == 0:
        raise ContractError("cannot train on an empty cohort")
    if val_volumes is None and len(volumes) > 2 * train.holdout > 0:
        volumes, val_volumes = volumes[:-train.holdout], volumes[-train.holdout:]
    rng = np.random.default_rng(train.seed)
    model = VQVAE(config, seed=int(rng.integers(2 ** 31)))
    _init_codebook_from_data(model, volumes[rng.permutation(len(volumes))[:train.batch_size]], rng)
    opt = nd.Adam(model.params, lr=train.lr, decay=train.lr_decay)
    history = TrainHistory()
    for epoch in range(1, train.epochs + 1):
        order = rng.permutation(len(volumes))
        sums: Dict[str, float] = {}
        counts = np.zeros(config.codebook_size, dtype=np.int64)
        batches = 0
        for start in range(0, len(order), train.batch_size):
            batch = volumes[np.sort(order[start:start + train.batch_size])]
            opt.zero_grad()
            x, x_hat, z_e, z_q, idx = model.forward(batch, training=True, rng=rng)
            total, parts = vqvae_loss(x, x_hat, z_e, z_q, config.beta)
            nd.backward(total)
            opt.step()
            counts += np.bincount(idx.ravel(), minlength=config.codebook_size)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        model.usage = counts
        rec = {"epoch": epoch, **{f"train_{k}": v / batches for k, v in sums.items()},
               "usage_entropy": usage_entropy(counts), "used_fraction": float((counts > 0).mean())}
        if train.restart_dead_codes and epoch < train.epochs:
            rec["restarted_codes"] = restart_dead_codes(model, counts, z_e.data, rng, opt)
        if val_volumes is not None and len(val_volumes):
            rec["val_mse"] = model.reconstruction_mse(val_volumes)
        history.epochs.append(rec)
        log.info("vqvae epoch %d %s", epoch, rec)
        if callback is not None:
            callback(rec)
    return model, history
