"""Reproducible synthetic cohorts of 3D volumes.

A cohort is built from a Voronoi atlas inside a foreground ellipsoid, a
per-region intensity template with linear age and sex effects, and smooth
correlated noise. Patients additionally carry a subtle anomaly over a fixed
subset of regions: either a mean shift, or a texture change that alters the
noise correlation length while preserving every region's mean and variance.

All randomness is derived from explicit seeds, so a cohort is a pure function
of its configuration and master seed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

GRID_MAGIC = b"VQNG"
GRID_VERSION = 1
_KIND_FLOAT32 = 0
_KIND_INT32 = 1
_HEADER = struct.Struct("<4sHHHHHH")  # magic, version, kind, D, H, W, reserved


@dataclass(frozen=True)
class GeneratorConfig:
    extents: Tuple[int, int, int] = (32, 32, 32)
    n_regions: int = 32
    age_range: Tuple[float, float] = (5.0, 37.0)
    noise_amplitude: float = 0.4
    noise_sigma: float = 1.0
    base_range: Tuple[float, float] = (0.3, 0.7)
    age_slope_sd: float = 0.001
    sex_offset_sd: float = 0.005
    foreground_radius: float = 0.46
    template_seed: int = 20220901
    texture_gain: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "age_range", tuple(float(a) for a in self.age_range))
        object.__setattr__(self, "base_range", tuple(float(a) for a in self.base_range))


@dataclass(frozen=True)
class CohortConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    n_train: int = 512
    n_eval_controls: int = 40
    n_eval_patients: int = 40
    anomaly_mode: str = "texture"
    anomaly_strength: float = 0.5
    n_affected_regions: int = 8

    def __post_init__(self):
        if isinstance(self.generator, dict):
            object.__setattr__(self, "generator", GeneratorConfig(**self.generator))


def config_hash(obj) -> str:
    """Stable short hash of a (nested) dataclass or plain mapping."""
    payload = asdict(obj) if hasattr(obj, "__dataclass_fields__") else obj
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def derive_seed(master_seed: int, key: str) -> int:
    """Independent 63-bit stream seed for ``key`` under ``master_seed``."""
    digest = hashlib.sha256(f"{int(master_seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ------------------------------------------------------------------ types

@dataclass
class Atlas:
    labels: np.ndarray
    names: List[str]

    @property
    def extents(self) -> tuple:
        return self.labels.shape

    @property
    def n_regions(self) -> int:
        return len(self.names)

    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_regions + 1)[1:]


@dataclass
class Volume:
    intensities: np.ndarray
    subject_id: str = ""

    @property
    def extents(self) -> tuple:
        return self.intensities.shape


@dataclass
class SubjectRecord:
    subject_id: str
    age: float
    sex: str
    diagnosis: str
    seed: int
    path: Optional[str] = None
    anomaly_mode: Optional[str] = None
    anomaly_strength: float = 0.0
    affected_regions: Tuple[int, ...] = ()

    @property
    def label(self) -> int:
        return 1 if self.diagnosis == "patient" else 0

    @property
    def sex_code(self) -> int:
        return 1 if self.sex == "M" else 0


@dataclass
class Cohort:
    records: List[SubjectRecord]
    split: str
    config_hash: str
    atlas: Optional[Atlas] = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    def volume(self, record: SubjectRecord) -> Volume:
        """Load the record's volume from disk, or regenerate it from its seed."""
        if record.path is not None and Path(record.path).exists():
            return Volume(load_grid(record.path), record.subject_id)
        if record.path is not None:
            raise FileNotFoundError(f"volume file for subject {record.subject_id} not found: {record.path}")
        return realize_subject(record, self.atlas, self.generator)

    def volumes(self) -> np.ndarray:
        """Stack of all volumes, shape (n, D, H, W)."""
        if not self.records:
            return np.zeros((0,) + tuple(self.generator.extents), dtype=np.float32)
        return np.stack([self.volume(r).intensities for r in self.records])

    def subset(self, records: Sequence[SubjectRecord]) -> "Cohort":
        return replace(self, records=list(records))


# ------------------------------------------------------------------ atlas

def _foreground_mask(extents, radius_fraction: float) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in extents], indexing="ij")
    r2 = np.zeros(extents)
    for g, e in zip(grids, extents):
        r2 += ((g - (e - 1) / 2.0) / (radius_fraction * e)) ** 2
    return r2 <= 1.0


def generate_atlas(extents, n_regions: int, seed: int, radius_fraction: float = 0.46) -> Atlas:
    """Voronoi parcellation of a foreground ellipsoid.

    Sites are distinct foreground voxels drawn with ``seed``; each foreground
    voxel takes the label (1-based) of its nearest site, ties going to the
    lower label. Background is 0.
    """
    extents = tuple(int(e) for e in extents)
    if n_regions < 2:
        raise ValueError(f"n_regions must be >= 2, got {n_regions}")
    if min(extents) <= 0:
        raise ValueError(f"extents must be positive, got {extents}")
    fg = _foreground_mask(extents, radius_fraction)
    coords = np.argwhere(fg)
    if n_regions > len(coords):
        raise ValueError(f"n_regions={n_regions} exceeds {len(coords)} foreground voxels")
    rng = np.random.default_rng(seed)
    sites = coords[np.sort(rng.choice(len(coords), size=n_regions, replace=False))]
    d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=-1)
    labels = np.zeros(extents, dtype=np.int32)
    labels[tuple(coords.T)] = np.argmin(d2, axis=1) + 1
    return Atlas(labels, [f"region_{i:03d}" for i in range(1, n_regions + 1)])


# -------------------------------------------------------------- subjects

@lru_cache(maxsize=32)
def _noise_norm(extents: tuple, sigma: float) -> float:
    delta = np.zeros(extents)
    delta[tuple(e // 2 for e in extents)] = 1.0
    return float(np.sqrt((gaussian_filter(delta, sigma, mode="wrap") ** 2).sum()))


def smooth_noise(extents, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian field with Gaussian correlation of width ``sigma``."""
    extents = tuple(extents)
    white = rng.standard_normal(extents)
    if sigma <= 0:
        return white
    return gaussian_filter(white, sigma, mode="wrap") / _noise_norm(extents, float(sigma))


@dataclass(frozen=True)
class RegionTemplate:
    base: np.ndarray
    age_slope: np.ndarray
    sex_offset: np.ndarray
    age_center: float


def region_template(config: GeneratorConfig, n_regions: Optional[int] = None) -> RegionTemplate:
    n = config.n_regions if n_regions is None else n_regions
    rng = np.random.default_rng(config.template_seed)
    lo, hi = config.base_range
    base = rng.uniform(lo, hi, size=n)
    slope = rng.normal(0.0, config.age_slope_sd, size=n)
    sex = rng.normal(0.0, config.sex_offset_sd, size=n)
    return RegionTemplate(base, slope, sex, 0.5 * (config.age_range[0] + config.age_range[1]))


def region_means(template: RegionTemplate, age: float, sex: str) -> np.ndarray:
    """Expected intensity per region for given demographics."""
    return (template.base + template.age_slope * (age - template.age_center)
            + template.sex_offset * (1.0 if sex == "M" else 0.0))


def generate_subject(atlas: Atlas, age: float, sex: str, seed: int,
                     config: GeneratorConfig = GeneratorConfig()) -> Volume:
    """Healthy volume: regional template for (age, sex) plus smooth noise, clamped to [0, 1]."""
    lo, hi = config.age_range
    if not lo <= age <= hi:
        raise ValueError(f"age {age} outside configured range {config.age_range}")
    if sex not in ("M", "F"):
        raise ValueError(f"sex must be 'M' or 'F', got {sex!r}")
    template = region_template(config, atlas.n_regions)
    lut = np.concatenate([[0.0], region_means(template, age, sex)])
    vol = lut[atlas.labels]
    if config.noise_amplitude > 0:
        rng = np.random.default_rng(seed)
        vol = vol + config.noise_amplitude * smooth_noise(atlas.extents, config.noise_sigma, rng)
    vol = np.where(atlas.labels > 0, np.clip(vol, 0.0, 1.0), 0.0)
    return Volume(vol.astype(np.float32))


def inject_anomaly(volume: Volume, atlas: Atlas, affected_regions: Iterable[int], strength: float,
                   mode: str, seed: int, config: GeneratorConfig = GeneratorConfig()) -> Volume:
    """Perturb a subset of regions.

    ``mean_shift`` adds +-strength * noise_amplitude to each affected region
    (sign drawn per region). ``texture`` replaces each affected region's noise
    with a fresh field of smoothing width ``noise_sigma * (1 + texture_gain *
    strength)`` (a negative gain divides instead, giving a rougher field), then
    rescales it to the region's original mean and variance.
    Strength 0 returns the input unchanged.
    """
    regions = sorted(int(r) for r in affected_regions)
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    bad = [r for r in regions if not 1 <= r <= atlas.n_regions]
    if bad:
        raise ValueError(f"unknown region ids {bad}; atlas has regions 1..{atlas.n_regions}")
    if mode not in ("mean_shift", "texture"):
        raise ValueError(f"unknown anomaly mode {mode!r}")
    if volume.extents != atlas.extents:
        raise ValueError(f"volume extents {volume.extents} differ from atlas {atlas.extents}")
    if strength == 0 or not regions:
        return Volume(volume.intensities.copy(), volume.subject_id)
    rng = np.random.default_rng(seed)
    vol = volume.intensities.astype(np.float64)
    if mode == "mean_shift":
        signs = rng.choice([-1.0, 1.0], size=len(regions))
        for r, s in zip(regions, signs):
            mask = atlas.labels == r
            vol[mask] += s * strength * config.noise_amplitude
    else:
        g = config.texture_gain
        sigma = config.noise_sigma * (1.0 + g * strength) if g >= 0 else config.noise_sigma / (1.0 - g * strength)
        fresh = smooth_noise(atlas.extents, sigma, rng)
        for r in regions:
            mask = atlas.labels == r
            old = vol[mask]
            if old.size < 2 or fresh[mask].std() == 0:
                continue
            vol[mask] = _match_moments(fresh[mask], old.mean(), old.std())
    vol = np.where(atlas.labels > 0, np.clip(vol, 0.0, 1.0), 0.0)
    return Volume(vol.astype(np.float32), volume.subject_id)


def _match_moments(values: np.ndarray, mean: float, sd: float, iters: int = 50) -> np.ndarray:
    """Affinely map ``values`` to (mean, sd) while staying inside [0, 1].

    Clipping after a single rescale would shift the moments, so rescaling and
    clipping alternate until the clipped field already has the target moments.
    """
    v = values.astype(np.float64)
    for _ in range(iters):
        cur = v.std()
        if cur == 0:
            break
        v = np.clip(mean + sd * (v - v.mean()) / cur, 0.0, 1.0)
        if abs(v.mean() - mean) < 1e-6 and abs(v.std() - sd) < 1e-6:
            break
    return v


def region_volumes(volume: Volume, atlas: Atlas) -> np.ndarray:
    """Mean intensity per region (labels 1..R), the regional feature of the baselines."""
    if volume.extents != atlas.extents:
        raise ValueError(f"volume extents {volume.extents} differ from atlas {atlas.extents}")
    labels = atlas.labels.ravel()
    vals = volume.intensities.ravel().astype(np.float64)
    n = atlas.n_regions + 1
    sums = np.bincount(labels, weights=vals, minlength=n)[1:]
    counts = np.bincount(labels, minlength=n)[1:]
    return sums / np.maximum(counts, 1)


def realize_subject(record: SubjectRecord, atlas: Atlas, config: GeneratorConfig) -> Volume:
    """Deterministically rebuild a record's volume, anomaly included."""
    vol = generate_subject(atlas, record.age, record.sex, record.seed, config)
    if record.anomaly_mode and record.anomaly_strength > 0 and record.affected_regions:
        vol = inject_anomaly(vol, atlas, record.affected_regions, record.anomaly_strength,
                             record.anomaly_mode, derive_seed(record.seed, "anomaly"), config)
    vol.subject_id = record.subject_id
    return vol


# --------------------------------------------------------------- cohorts

def affected_region_set(config: CohortConfig, master_seed: int) -> Tuple[int, ...]:
    n = config.generator.n_regions
    k = min(config.n_affected_regions, n)
    rng = np.random.default_rng(derive_seed(master_seed, "affected-regions"))
    return tuple(sorted(int(r) for r in rng.choice(np.arange(1, n + 1), size=k, replace=False)))


def _sample_demographics(config: GeneratorConfig, seed: int) -> Tuple[float, str]:
    rng = np.random.default_rng(seed)
    lo, hi = config.age_range
    age = round(float(rng.uniform(lo, hi)), 3)
    sex = "M" if rng.random() < 0.5 else "F"
    return age, sex


def generate_cohorts(config: CohortConfig, master_seed: int) -> Tuple[Cohort, Cohort]:
    """Build the all-control training cohort and the mixed evaluation cohort.

    Volumes are not materialised; :meth:`Cohort.volume` regenerates them
    from each record's seed. Both cohorts share the atlas.
    """
    gen = config.generator
    for name in ("n_train", "n_eval_controls", "n_eval_patients"):
        if getattr(config, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    if config.n_train <= 0:
        raise ValueError("n_train must be positive")
    atlas = generate_atlas(gen.extents, gen.n_regions, derive_seed(master_seed, "atlas"),
                           gen.foreground_radius)
    chash = config_hash({"config": asdict(config), "master_seed": int(master_seed)})
    affected = affected_region_set(config, master_seed)

    train = []
    for i in range(config.n_train):
        sid = f"train-{i:04d}"
        seed = derive_seed(master_seed, sid)
        age, sex = _sample_demographics(gen, derive_seed(seed, "demographics"))
        train.append(SubjectRecord(sid, age, sex, "control", seed))

    evals = []
    n_eval = config.n_eval_controls + config.n_eval_patients
    order = np.random.default_rng(derive_seed(master_seed, "eval-labels")).permutation(n_eval)
    for i in range(n_eval):
        sid = f"eval-{i:04d}"
        seed = derive_seed(master_seed, sid)
        age, sex = _sample_demographics(gen, derive_seed(seed, "demographics"))
        if order[i] < config.n_eval_patients:
            evals.append(SubjectRecord(sid, age, sex, "patient", seed, anomaly_mode=config.anomaly_mode,
                                       anomaly_strength=float(config.anomaly_strength),
                                       affected_regions=affected))
        else:
            evals.append(SubjectRecord(sid, age, sex, "control", seed))

    return (Cohort(train, "train", chash, atlas, gen), Cohort(evals, "eval", chash, atlas, gen))


# ------------------------------------------------------------------ files

def save_grid(path, grid: np.ndarray) -> None:
    """Write a 16-byte header plus a little-endian float32 or int32 voxel buffer."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"grid must be 3-d, got shape {grid.shape}")
    if grid.dtype.kind in "iu":
        kind, buf = _KIND_INT32, grid.astype("<i4")
    else:
        kind, buf = _KIND_FLOAT32, grid.astype("<f4")
    d, h, w = grid.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, GRID_VERSION, kind, d, h, w, 0))
        fh.write(np.ascontiguousarray(buf).tobytes())


def load_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated grid header")
    magic, version, kind, d, h, w, _ = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid file")
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    dtype = "<f4" if kind == _KIND_FLOAT32 else "<i4"
    expected = _HEADER.size + d * h * w * 4
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, offset=_HEADER.size).reshape(d, h, w)
    return arr.astype(np.float32 if kind == _KIND_FLOAT32 else np.int32)


def cohort_manifest(cohort: Cohort) -> dict:
    return {
        "split": cohort.split,
        "config_hash": cohort.config_hash,
        "generator": asdict(cohort.generator),
        "records": [
            {**asdict(r), "affected_regions": list(r.affected_regions)} for r in cohort.records
        ],
    }


def write_cohort(cohort: Cohort, directory, atlas_path=None) -> Path:
    """Persist volumes and a JSON manifest; returns the manifest path.

    Record paths are stored relative to the manifest's directory.
    """
    directory = Path(directory)
    (directory / cohort.split).mkdir(parents=True, exist_ok=True)
    stored = []
    for rec in cohort.records:
        rel = f"{cohort.split}/{rec.subject_id}.vol"
        save_grid(directory / rel, realize_subject(rec, cohort.atlas, cohort.generator).intensities)
        stored.append(replace(rec, path=rel))
    manifest = cohort_manifest(replace(cohort, records=stored))
    if atlas_path is not None:
        manifest["atlas"] = str(atlas_path)
    path = directory / f"{cohort.split}_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def read_cohort(manifest_path, atlas: Optional[Atlas] = None) -> Cohort:
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    records = []
    for r in data["records"]:
        r = dict(r)
        r["affected_regions"] = tuple(r.get("affected_regions", ()))
        if r.get("path") is not None:
            r["path"] = str(base / r["path"])
        records.append(SubjectRecord(**r))
    gen = GeneratorConfig(**data["generator"])
    if atlas is None and data.get("atlas"):
        atlas = read_atlas(base / data["atlas"])
    return Cohort(records, data["split"], data["config_hash"], atlas, gen)


def write_atlas(atlas: Atlas, path) -> None:
    path = Path(path)
    save_grid(path, atlas.labels)
    path.with_suffix(".json").write_text(json.dumps({"names": atlas.names}, indent=2) + "\n")


def read_atlas(path) -> Atlas:
    path = Path(path)
    labels = load_grid(path)
    names_file = path.with_suffix(".json")
    if names_file.exists():
        names = json.loads(names_file.read_text())["names"]
    else:
        names = [f"region_{i:03d}" for i in range(1, int(labels.max()) + 1)]
    return Atlas(labels, names)
