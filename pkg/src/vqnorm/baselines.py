"""Comparison normative models: region-wise GPR, region-wise BLR and brain age.

The region models predict each region's mean intensity from (age, sex) and
turn the prediction error into z-scores; the subject proxy is the mean |z|
over regions (signed mean also reported). The brain-age model is a small
fully convolutional regressor whose absolute age error is the proxy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular

from . import ndgrad as nd
from .errors import ContractError, NumericError
from .ndgrad import Tensor
from .synthcohort import Cohort, region_volumes

log = logging.getLogger(__name__)

GPR_LENGTH_SCALES = (0.5, 1.0, 2.0, 4.0)
GPR_NOISE_FRACTIONS = (0.01, 0.1, 1.0)
JITTER = 1e-8


# ---------------------------------------------------------------- covariates

@dataclass(frozen=True)
class CovariateScaler:
    """Age standardisation with training statistics; sex stays 0/1."""
    age_mean: float
    age_sd: float

    @classmethod
    def fit(cls, ages) -> "CovariateScaler":
        a = np.asarray(ages, dtype=np.float64)
        sd = float(a.std())
        return cls(float(a.mean()), sd if sd > 0 else 1.0)

    def transform(self, ages, sexes) -> np.ndarray:
        a = (np.asarray(ages, dtype=np.float64) - self.age_mean) / self.age_sd
        return np.column_stack([a, np.asarray(sexes, dtype=np.float64)])


def sex_codes(sexes) -> np.ndarray:
    """M -> 1, F -> 0; numeric input passes through."""
    return np.array([1.0 if s == "M" else 0.0 if s == "F" else float(s) for s in sexes])


# ----------------------------------------------------------------------- GPR

def rbf_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, variance: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return variance * np.exp(-0.5 * d2 / length_scale ** 2)


@dataclass
class GprRegion:
    """Exact GP posterior for one region with a constant mean."""
    x: np.ndarray
    mean: float
    signal_var: float
    noise_var: float
    length_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    log_marginal: float

    def predict(self, xq: np.ndarray, include_noise: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior predictive mean and variance at query covariates."""
        ks = rbf_kernel(np.atleast_2d(xq), self.x, self.length_scale, self.signal_var)
        mu = self.mean + ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = self.signal_var - (v * v).sum(0)
        if include_noise:
            var = var + self.noise_var
        return mu, np.maximum(var, 0.0)


def _gp_fit(x, y, length_scale, signal_var, noise_var) -> GprRegion:
    n = len(y)
    m = float(y.mean())
    k = rbf_kernel(x, x, length_scale, signal_var)
    k[np.diag_indices(n)] += noise_var + JITTER * signal_var
    try:
        chol = np.linalg.cholesky(k)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"GPR kernel matrix is singular (length scale {length_scale})") from exc
    r = y - m
    alpha = solve_triangular(chol.T, solve_triangular(chol, r, lower=True), lower=False)
    lml = -0.5 * r @ alpha - np.log(np.diag(chol)).sum() - 0.5 * n * math.log(2 * math.pi)
    return GprRegion(x, m, signal_var, noise_var, length_scale, chol, alpha, float(lml))


def fit_gpr_region(x, y, length_scales: Sequence[float] = GPR_LENGTH_SCALES,
                   noise_fractions: Sequence[float] = GPR_NOISE_FRACTIONS) -> GprRegion:
    """Grid-search (length scale, noise) by log marginal likelihood.

    The RBF signal variance and the noise grid are both expressed relative to
    the target variance, so z-scores are unit-free.

    Args:
        x: standardised covariates (N, p).
        y: targets (N,).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 3:
        raise ContractError("GPR needs at least 3 training rows")
    var = float(y.var())
    if var == 0:
        var = 1.0  # constant targets: any positive scale gives a constant posterior mean
    best = None
    for ls in length_scales:
        for frac in noise_fractions:
            fit = _gp_fit(x, y, ls, var, frac * var)
            if best is None or fit.log_marginal > best.log_marginal:
                best = fit
    return best


# ----------------------------------------------------------------------- BLR

@dataclass(frozen=True)
class BlrPrior:
    """Normal-inverse-gamma prior: w | s2 ~ N(m0, s2 * v0 I), s2 ~ IG(a0, b0).

    ``b0`` is ``b0_fraction * a0 * var(y)`` so the prior is scale-free.
    """
    v0: float = 100.0
    a0: float = 1.0
    b0_fraction: float = 0.01
    m0: float = 0.0


@dataclass
class BlrRegion:
    mean: np.ndarray       # posterior mean of w
    cov: np.ndarray        # V_n (scaled by s2)
    a: float
    b: float

    @property
    def dof(self) -> float:
        return 2.0 * self.a

    @property
    def noise_var(self) -> float:
        """Posterior mean of the noise variance, b / (a - 1)."""
        return self.b / (self.a - 1.0)

    def predict(self, design: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Student-t predictive mean and variance for rows of the design matrix."""
        d = np.atleast_2d(design)
        mu = d @ self.mean
        q = np.einsum("ij,jk,ik->i", d, self.cov, d)
        scale2 = (self.b / self.a) * (1.0 + q)
        nu = self.dof
        var = scale2 * nu / (nu - 2.0) if nu > 2 else np.full_like(scale2, np.inf)
        return mu, var


def blr_design(x: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(x)), x])


def fit_blr_region(design, y, prior: BlrPrior = BlrPrior()) -> BlrRegion:
    """Conjugate posterior for y = design @ w + noise."""
    d = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = d.shape
    if n < 4:
        raise ContractError("BLR needs at least 4 training rows")
    if np.linalg.matrix_rank(d) < p:
        raise NumericError("BLR design matrix is rank deficient")
    var = float(y.var()) or 1.0
    b0 = prior.b0_fraction * prior.a0 * var
    m0 = np.full(p, prior.m0)
    prec0 = np.eye(p) / prior.v0
    prec_n = prec0 + d.T @ d
    cov_n = np.linalg.inv(prec_n)
    m_n = cov_n @ (prec0 @ m0 + d.T @ y)
    a_n = prior.a0 + 0.5 * n
    b_n = b0 + 0.5 * (y @ y + m0 @ prec0 @ m0 - m_n @ prec_n @ m_n)
    return BlrRegion(m_n, cov_n, a_n, max(float(b_n), 1e-300))


# ----------------------------------------------------------- region models

@dataclass
class RegionNormativeModel:
    kind: str
    scaler: CovariateScaler
    regions: list

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def predict(self, ages, sexes) -> Tuple[np.ndarray, np.ndarray]:
        """Predictive mean and sd, each (N, R)."""
        x = self.scaler.transform(ages, sex_codes(sexes))
        mus, sds = [], []
        for m in self.regions:
            if self.kind == "gpr":
                mu, var = m.predict(x)
            else:
                mu, var = m.predict(blr_design(x))
            mus.append(mu)
            sds.append(np.sqrt(var))
        return np.column_stack(mus), np.column_stack(sds)


def fit_region_models(kind: str, ages, sexes, targets) -> RegionNormativeModel:
    """One GPR or BLR per region column of ``targets`` (N, R), controls only."""
    if kind not in ("gpr", "blr"):
        raise ValueError(f"unknown region model {kind!r}")
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim != 2 or len(y) == 0:
        raise ContractError("targets must be a non-empty (subjects, regions) matrix")
    scaler = CovariateScaler.fit(ages)
    x = scaler.transform(ages, sex_codes(sexes))
    if kind == "gpr":
        regions = [fit_gpr_region(x, y[:, r]) for r in range(y.shape[1])]
    else:
        design = blr_design(x)
        regions = [fit_blr_region(design, y[:, r]) for r in range(y.shape[1])]
    return RegionNormativeModel(kind, scaler, regions)


@dataclass
class ZScoreReport:
    z: np.ndarray

    @property
    def mean_abs(self) -> np.ndarray:
        return np.abs(self.z).mean(axis=1)

    @property
    def mean_signed(self) -> np.ndarray:
        return self.z.mean(axis=1)


def zscore_subject(model: RegionNormativeModel, region_values, ages, sexes) -> ZScoreReport:
    """z_r = (observed - predictive mean) / predictive sd for each subject and region."""
    obs = np.atleast_2d(np.asarray(region_values, dtype=np.float64))
    if obs.shape[1] != model.n_regions:
        raise ContractError(f"{obs.shape[1]} region values for a {model.n_regions}-region model")
    mu, sd = model.predict(np.atleast_1d(ages), np.atleast_1d(sexes))
    if not np.all(sd > 0):
        raise NumericError("non-positive predictive standard deviation")
    return ZScoreReport((obs - mu) / sd)


def cohort_region_values(cohort: Cohort) -> np.ndarray:
    """Region means (N, R) for every subject, in manifest order."""
    return np.array([region_volumes(cohort.volume(r), cohort.atlas) for r in cohort.records])


# ------------------------------------------------------------- brain age

@dataclass(frozen=True)
class BrainAgeConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 64)
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.9999
    holdout: int = 32


@dataclass
class BrainAgeModel:
    """Stride-2 conv blocks, global average pooling and a linear age head."""
    params: Dict[str, Tensor]
    config: BrainAgeConfig
    age_mean: float
    age_sd: float
    history: List[dict] = field(default_factory=list)

    @classmethod
    def init(cls, config: BrainAgeConfig, seed: int, age_mean: float = 0.0, age_sd: float = 1.0):
        rng = np.random.default_rng(seed)
        dt = nd.get_dtype()
        p: Dict[str, Tensor] = {}
        cin = 1
        for i, w in enumerate(config.widths):
            fan = cin * 27
            p[f"conv{i}.w"] = nd.parameter(rng.normal(0, math.sqrt(2.0 / fan), (w, cin, 3, 3, 3)).astype(dt),
                                           f"conv{i}.w")
            p[f"conv{i}.b"] = nd.parameter(np.zeros(w, dtype=dt), f"conv{i}.b")
            cin = w
        p["head.w"] = nd.parameter(rng.normal(0, 1.0 / math.sqrt(cin), (cin, 1)).astype(dt), "head.w")
        p["head.b"] = nd.parameter(np.zeros(1, dtype=dt), "head.b")
        return cls(p, config, age_mean, age_sd)

    def _forward(self, volumes) -> Tensor:
        x = np.asarray(volumes)
        if x.ndim == 3:
            x = x[None]
        h = Tensor(np.ascontiguousarray(x[:, None], dtype=nd.get_dtype()))
        for i in range(len(self.config.widths)):
            h = nd.relu(nd.conv3d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2, padding=1))
        pooled = nd.mean(nd.reshape(h, (h.shape[0], h.shape[1], -1)), axis=2)
        return nd.reshape(nd.linear(pooled, self.params["head.w"], self.params["head.b"]), (-1,))

    def predict(self, volumes, batch_size: int = 16) -> np.ndarray:
        vols = np.asarray(volumes)
        if vols.ndim == 3:
            vols = vols[None]
        out = [self._forward(vols[i:i + batch_size]).data.astype(np.float64)
               for i in range(0, len(vols), batch_size)]
        z = np.concatenate(out) if out else np.zeros(0)
        return z * self.age_sd + self.age_mean


def train_brain_age(volumes, ages, config: BrainAgeConfig = BrainAgeConfig(), seed: int = 0,
                    callback=None) -> BrainAgeModel:
    """Fit the regressor with MSE on standardised age (controls only)."""
    vols = np.asarray(volumes)
    ages = np.asarray(ages, dtype=np.float64)
    if len(vols) == 0:
        raise ContractError("cannot train brain age on an empty cohort")
    val = None
    if len(vols) > 2 * config.holdout > 0:
        vols, val = vols[:-config.holdout], (vols[-config.holdout:], ages[-config.holdout:])
        ages = ages[:-config.holdout]
    sd = float(ages.std())
    rng = np.random.default_rng(seed)
    model = BrainAgeModel.init(config, int(rng.integers(2 ** 31)), float(ages.mean()), sd if sd > 0 else 1.0)
    target = (ages - model.age_mean) / model.age_sd
    opt = nd.Adam(model.params, lr=config.lr, decay=config.lr_decay)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(vols))
        total, batches = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            sel = np.sort(order[start:start + config.batch_size])
            opt.zero_grad()
            loss = nd.mse(model._forward(vols[sel]), Tensor(target[sel].astype(nd.get_dtype())))
            nd.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        rec = {"epoch": epoch, "train_mse": total / batches}
        if val is not None:
            rec["val_mae"] = float(np.abs(model.predict(val[0]) - val[1]).mean())
        model.history.append(rec)
        log.info("brain-age epoch %d %s", epoch, rec)
        if callback is not None:
            callback(rec)
    return model


def brain_age_proxy(model: BrainAgeModel, volume, age: float) -> float:
    """|predicted age - chronological age|."""
    arr = volume.intensities if hasattr(volume, "intensities") else np.asarray(volume)
    return float(abs(model.predict(arr[None])[0] - age))
