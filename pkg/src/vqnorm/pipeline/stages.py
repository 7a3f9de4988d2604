"""Pipeline stages operating on a run directory.

Layout of ``out/``::

    config.yaml            config echo
    manifest.json          RunManifest (artifacts, hashes, stage times)
    metrics.jsonl          line-delimited training/evaluation records
    cohorts/               atlas, train and eval cohorts, sweep cohorts
    checkpoints/           vqvae.ckpt, transformer.ckpt, brainage.ckpt
    scores/                per-method scores and region matrices
    report/                report.tsv, report.txt, regions.tsv, violin.tsv, sweep.tsv
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .. import ndgrad as nd
from .. import stats
from ..artransformer import train_transformer
from ..baselines import (BrainAgeModel, cohort_region_values, fit_region_models, train_brain_age,
                         zscore_subject)
from ..errors import ConfigError, MissingPrerequisite
from ..normscore import CohortScores, read_scores, score_cohort, scores_table
from ..synthcohort import (Cohort, generate_cohorts, read_atlas, read_cohort, write_atlas, write_cohort)
from ..vqvae import train_vqvae
from .checkpoint import (load_brain_age, load_transformer, load_vqvae, save_brain_age, save_transformer,
                         save_vqvae)
from .config import ExperimentConfig, SweepSpec

log = logging.getLogger(__name__)

METHOD_LABELS = {
    "transformer": "VQVAE + Transformer",
    "brainage": "Brain age (SFCN)",
    "gpr": "GPR",
    "blr": "BLR",
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sweep_name(s: SweepSpec) -> str:
    return f"sweep-{s.mode}-{s.strength:g}"


# ------------------------------------------------------------------ manifest

@dataclass
class RunManifest:
    run_id: str
    seed: int
    config: dict
    artifacts: Dict[str, dict] = field(default_factory=dict)
    stages: Dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load_or_new(cls, run: "RunDir", cfg: ExperimentConfig) -> "RunManifest":
        if run.manifest.exists():
            data = json.loads(run.manifest.read_text())
            return cls(**data)
        return cls(run_id=f"{cfg.hash()}-s{cfg.seed}", seed=cfg.seed, config=cfg.to_dict())

    def record(self, run: "RunDir", name: str, path: Path, config_hash: str, **extra) -> None:
        path = Path(path)
        self.artifacts[name] = {"path": str(path.relative_to(run.root)), "sha256": sha256_file(path),
                                "config_hash": config_hash, **extra}

    def stage_done(self, stage: str, started: float) -> None:
        self.stages[stage] = {"started": _iso(started), "finished": _iso(time.time()),
                              "seconds": round(time.time() - started, 3)}

    def save(self, run: "RunDir") -> None:
        for name, art in self.artifacts.items():
            if not (run.root / art["path"]).exists():
                raise MissingPrerequisite(f"manifest references missing artifact {name}: {art['path']}")
        run.manifest.write_text(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")

    def validate_chain(self, run: "RunDir") -> None:
        """Check every artifact's checksum and that the transformer cites the current VQ-VAE."""
        for name, art in self.artifacts.items():
            p = run.root / art["path"]
            if not p.exists():
                raise MissingPrerequisite(f"artifact {name} missing: {p}")
            if sha256_file(p) != art["sha256"]:
                raise ConfigError(f"artifact {name} was modified after it was recorded: {p}")
        vq, tr = self.artifacts.get("vqvae"), self.artifacts.get("transformer")
        if vq and tr and tr.get("paired_vqvae") != vq.get("fingerprint"):
            raise ConfigError("transformer checkpoint was not trained on the recorded VQ-VAE")


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t))


# ------------------------------------------------------------------ run dir

class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.jsonl"

    def cohorts(self, *parts) -> Path:
        return self.root.joinpath("cohorts", *parts)

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def scores(self, name: str) -> Path:
        return self.root / "scores" / name

    def report(self, name: str) -> Path:
        return self.root / "report" / name

    def log_metrics(self, stage: str, record: dict) -> None:
        self.metrics.parent.mkdir(parents=True, exist_ok=True)
        with open(self.metrics, "a") as fh:
            fh.write(json.dumps({"stage": stage, **record}, sort_keys=True) + "\n")


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{what} not found ({path}); run `vqnorm {stage}` first")
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _data_hash(cfg: ExperimentConfig) -> str:
    return cfg.section_hash("generator", "cohort")


def _vqvae_hash(cfg: ExperimentConfig) -> str:
    return cfg.section_hash("generator", "cohort", "vqvae", "vqvae_train")


def _transformer_hash(cfg: ExperimentConfig) -> str:
    return cfg.section_hash("generator", "cohort", "vqvae", "vqvae_train", "transformer", "transformer_train")


def _check_hash(meta: dict, expected: str, what: str, stage: str) -> None:
    if meta.get("experiment_hash") != expected:
        raise ConfigError(f"{what} was produced with a different configuration "
                          f"({meta.get('experiment_hash')} != {expected}); re-run `vqnorm {stage}`")


# ------------------------------------------------------------------ cohorts

def _load_cohort(run: RunDir, cfg: ExperimentConfig, name: str) -> Cohort:
    path = _require(run.cohorts(f"{name}_manifest.json") if name in ("train", "eval")
                    else run.cohorts(name, "eval_manifest.json"), f"{name} cohort", "synth")
    atlas = read_atlas(_require(run.cohorts("atlas.vol"), "atlas", "synth"))
    cohort = read_cohort(path, atlas)
    meta = json.loads(run.cohorts("synth.json").read_text()) if run.cohorts("synth.json").exists() else {}
    if meta.get("experiment_hash") != _data_hash(cfg):
        raise ConfigError("cohorts were generated with a different configuration; re-run `vqnorm synth`")
    return cohort


def stage_synth(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    t0 = time.time()
    train, ev = generate_cohorts(cfg.cohort, cfg.seed)
    write_atlas(train.atlas, run.cohorts("atlas.vol"))
    for cohort in (train, ev):
        path = write_cohort(cohort, run.cohorts(), atlas_path="atlas.vol")
        manifest.record(run, f"cohort.{cohort.split}", path, _data_hash(cfg))
    for s in cfg.evaluation.sweeps:
        variant = replace(cfg.cohort, anomaly_mode=s.mode, anomaly_strength=s.strength)
        _, sev = generate_cohorts(variant, cfg.seed)
        path = write_cohort(sev, run.cohorts(sweep_name(s)), atlas_path="../atlas.vol")
        manifest.record(run, f"cohort.{sweep_name(s)}", path, _data_hash(cfg))
    _write(run.cohorts("synth.json"), json.dumps({"experiment_hash": _data_hash(cfg)}) + "\n")
    manifest.record(run, "atlas", run.cohorts("atlas.vol"), _data_hash(cfg))
    run.log_metrics("synth", {"n_train": len(train), "n_eval": len(ev),
                              "affected_regions": list(ev.records[0].affected_regions)
                              if any(r.label for r in ev.records) else []})
    manifest.stage_done("synth", t0)


# ------------------------------------------------------------------ training

def stage_train_vqvae(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    t0 = time.time()
    train = _load_cohort(run, cfg, "train")
    model, history = train_vqvae(train.volumes(), cfg.vqvae, cfg.vqvae_train,
                                 callback=lambda r: run.log_metrics("train-vqvae", r))
    path = run.checkpoint("vqvae")
    save_vqvae(path, model, {"experiment_hash": _vqvae_hash(cfg), "history": history.to_dict()})
    manifest.record(run, "vqvae", path, _vqvae_hash(cfg), fingerprint=model.fingerprint())
    manifest.stage_done("train-vqvae", t0)


def _load_vqvae(run: RunDir, cfg: ExperimentConfig):
    model, meta = load_vqvae(_require(run.checkpoint("vqvae"), "vqvae checkpoint", "train-vqvae"))
    _check_hash(meta, _vqvae_hash(cfg), "vqvae checkpoint", "train-vqvae")
    return model, meta


def stage_train_transformer(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    t0 = time.time()
    vq, _ = _load_vqvae(run, cfg)
    train = _load_cohort(run, cfg, "train")
    model, history = train_transformer(vq, train.volumes(), cfg.transformer_config(), cfg.transformer_train,
                                       callback=lambda r: run.log_metrics("train-transformer", r))
    path = run.checkpoint("transformer")
    save_transformer(path, model, {"experiment_hash": _transformer_hash(cfg), "history": history.to_dict()})
    manifest.record(run, "transformer", path, _transformer_hash(cfg), paired_vqvae=model.paired_vqvae)
    manifest.stage_done("train-transformer", t0)


def _load_models(run: RunDir, cfg: ExperimentConfig):
    path = _require(run.checkpoint("transformer"), "transformer checkpoint", "train-transformer")
    vq, _ = _load_vqvae(run, cfg)
    tr, meta = load_transformer(path, vq)
    _check_hash(meta, _transformer_hash(cfg), "transformer checkpoint", "train-transformer")
    return vq, tr


# ------------------------------------------------------------------ scoring

def _eval_names(cfg: ExperimentConfig) -> List[str]:
    return ["eval"] + [sweep_name(s) for s in cfg.evaluation.sweeps]


def stage_score(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    t0 = time.time()
    vq, tr = _load_models(run, cfg)
    for name in _eval_names(cfg):
        cohort = _load_cohort(run, cfg, name)
        scored = score_cohort(cohort, vq, tr)
        p1 = _write(run.scores(f"{name}.transformer.tsv"), scored.scores_tsv())
        p2 = _write(run.scores(f"{name}.regions.tsv"), scored.regions_tsv())
        manifest.record(run, f"scores.{name}.transformer", p1, _transformer_hash(cfg))
        manifest.record(run, f"scores.{name}.regions", p2, _transformer_hash(cfg))
    manifest.stage_done("score", t0)


def stage_baselines(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    """Fit GPR/BLR on region means and the brain-age regressor (controls only)."""
    t0 = time.time()
    train = _load_cohort(run, cfg, "train")
    ages = np.array([r.age for r in train.records])
    sexes = [r.sex for r in train.records]
    y_train = cohort_region_values(train)
    region_models = {kind: fit_region_models(kind, ages, sexes, y_train) for kind in ("gpr", "blr")}
    ba_path = run.checkpoint("brainage")
    ba = train_brain_age(train.volumes(), ages, cfg.brain_age, seed=cfg.seed,
                         callback=lambda r: run.log_metrics("train-brainage", r))
    save_brain_age(ba_path, ba)
    manifest.record(run, "brainage", ba_path, cfg.section_hash("generator", "cohort", "brain_age"))
    for name in _eval_names(cfg):
        cohort = _load_cohort(run, cfg, name)
        recs = sorted(cohort.records, key=lambda r: r.subject_id)
        cohort = cohort.subset(recs)
        e_ages = np.array([r.age for r in recs])
        e_sexes = [r.sex for r in recs]
        text = ""
        if recs:
            values = cohort_region_values(cohort)
            for kind, model in region_models.items():
                z = zscore_subject(model, values, e_ages, e_sexes)
                text += scores_table(kind, recs, z.mean_abs, signed=z.mean_signed, header=not text)
            pred = ba.predict(cohort.volumes())
            text += scores_table("brainage", recs, np.abs(pred - e_ages), signed=pred - e_ages, header=False)
        path = _write(run.scores(f"{name}.baselines.tsv"), text)
        manifest.record(run, f"scores.{name}.baselines", path, _data_hash(cfg))
    manifest.stage_done("baselines", t0)


# ------------------------------------------------------------------ evaluation

def _method_columns(parsed: dict, method: str):
    m = parsed[method]
    y = [1 if d == "patient" else 0 for d in m["diagnosis"]]
    return m["subject_id"], np.array(m["score"], dtype=float), np.array(m["signed_score"], dtype=float), y


def _evaluate_cohort(run: RunDir, cfg: ExperimentConfig, name: str, with_baselines: bool):
    parsed = read_scores(_require(run.scores(f"{name}.transformer.tsv"), "transformer scores", "score").read_text())
    if with_baselines:
        parsed.update(read_scores(_require(run.scores(f"{name}.baselines.tsv"), "baseline scores",
                                           "baselines").read_text()))
    methods = [m for m in ("transformer", "brainage", "gpr", "blr") if m in parsed]
    scores = {}
    violin = {}
    for m in methods:
        ids, s, _, y = _method_columns(parsed, m)
        scores[METHOD_LABELS[m]] = (s, y)
        violin[m] = (ids, s, y)
    region_lines = run.scores(f"{name}.regions.tsv").read_text().splitlines()
    header = region_lines[0].split("\t")[1:]
    table = np.array([[float(v) for v in ln.split("\t")[1:]] for ln in region_lines[1:]]) \
        if len(region_lines) > 1 else None
    _, _, _, y_t = _method_columns(parsed, "transformer")
    report = stats.build_report(scores, table, y_t, list(range(1, len(header) + 1)), header,
                                top_k=min(cfg.evaluation.top_k, len(header)), alpha=cfg.evaluation.alpha)
    for m in ("gpr", "blr"):
        if m in parsed:
            _, _, signed, y = _method_columns(parsed, m)
            if len(set(y)) == 2:
                res = stats.evaluate_method(METHOD_LABELS[m], signed, y)
                report.notes.append(f"{METHOD_LABELS[m]} with signed mean z: AUROC {res.auroc:.3f}, "
                                    f"correlation {res.correlation:.3f}")
    return report, violin


def stage_evaluate(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    """Compute statistics for the main evaluation cohort and every sweep."""
    t0 = time.time()
    report, violin = _evaluate_cohort(run, cfg, "eval", with_baselines=True)
    summary = {"methods": [asdict(m) for m in report.methods],
               "regions": [asdict(r) for r in report.regions], "notes": report.notes, "sweeps": []}
    affected = _affected_regions(run, cfg)
    for s in cfg.evaluation.sweeps:
        name = sweep_name(s)
        rep, _ = _evaluate_cohort(run, cfg, name, with_baselines=False)
        row = {"mode": s.mode, "strength": s.strength}
        if rep.methods:
            m = rep.methods[0]
            row.update(auroc=m.auroc, correlation=m.correlation, p_value=m.corr_p_value)
        k = len(affected)
        if rep.regions and k:
            top = sorted(rep.regions, key=lambda e: (-abs(e.cohens_d), e.region_id))[:k]
            row.update(top_k_regions=[e.region_id for e in top],
                       recovered=len({e.region_id for e in top} & set(affected)), injected=k)
        summary["sweeps"].append(row)
    summary["affected_regions"] = affected
    path = _write(run.report("evaluation.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")
    _write(run.report("violin.tsv"), stats.violin_rows(violin))
    manifest.record(run, "evaluation", path, cfg.hash())
    run.log_metrics("evaluate", {m["method"]: m["auroc"] for m in summary["methods"]})
    manifest.stage_done("evaluate", t0)


def _affected_regions(run: RunDir, cfg: ExperimentConfig) -> List[int]:
    cohort = _load_cohort(run, cfg, "eval")
    for r in cohort.records:
        if r.affected_regions:
            return list(r.affected_regions)
    from ..synthcohort import affected_region_set
    return list(affected_region_set(cfg.cohort, cfg.seed))


def stage_report(cfg: ExperimentConfig, run: RunDir, manifest: RunManifest) -> None:
    """Format the evaluation into the Table-1-style text and delimited tables."""
    t0 = time.time()
    data = json.loads(_require(run.report("evaluation.json"), "evaluation results", "evaluate").read_text())
    report = stats.EvaluationReport(
        methods=[stats.MethodResult(**m) for m in data["methods"]],
        regions=[stats.RegionEffect(**r) for r in data["regions"]],
        top_k=cfg.evaluation.top_k, alpha=cfg.evaluation.alpha, notes=list(data["notes"]))
    text = report.to_text()
    if data["sweeps"]:
        lines = ["", "Transformer NLL across additional evaluation cohorts"]
        for s in data["sweeps"]:
            auc = f"{s['auroc']:.3f}" if "auroc" in s else "n/a"
            rec = f"  regions recovered {s['recovered']}/{s['injected']}" if "recovered" in s else ""
            lines.append(f"  {s['mode']:<11} strength {s['strength']:<5g} AUROC {auc}{rec}")
        text += "\n".join(lines) + "\n"
    _write(run.report("report.txt"), text)
    _write(run.report("report.tsv"), report.to_tsv())
    _write(run.report("regions.tsv"), report.regions_tsv())
    sweep = "mode\tstrength\tauroc\tcorrelation\tp_value\trecovered\tinjected\n"
    for s in data["sweeps"]:
        sweep += "\t".join([s["mode"], f"{s['strength']:g}", f"{s.get('auroc', float('nan')):.6f}",
                            f"{s.get('correlation', float('nan')):.6f}", f"{s.get('p_value', float('nan')):.6g}",
                            str(s.get("recovered", "")), str(s.get("injected", ""))]) + "\n"
    _write(run.report("sweep.tsv"), sweep)
    for name in ("report.txt", "report.tsv", "regions.tsv", "sweep.tsv", "violin.tsv"):
        if run.report(name).exists():
            manifest.record(run, f"report.{name}", run.report(name), cfg.hash())
    manifest.stage_done("report", t0)


STAGES = {
    "synth": stage_synth,
    "train-vqvae": stage_train_vqvae,
    "train-transformer": stage_train_transformer,
    "score": stage_score,
    "baselines": stage_baselines,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(name: str, cfg: ExperimentConfig, out) -> RunManifest:
    run = RunDir(out)
    run.root.mkdir(parents=True, exist_ok=True)
    _write(run.root / "config.yaml", cfg.dump())
    manifest = RunManifest.load_or_new(run, cfg)
    if manifest.config != cfg.to_dict():
        manifest.config = cfg.to_dict()
        manifest.run_id = f"{cfg.hash()}-s{cfg.seed}"
    nd.set_precision(cfg.precision)
    log.info("stage %s -> %s", name, run.root)
    STAGES[name](cfg, run, manifest)
    manifest.save(run)
    return manifest


def run_all(cfg: ExperimentConfig, out) -> RunManifest:
    manifest = None
    for name in STAGES:
        manifest = run_stage(name, cfg, out)
    RunManifest.load_or_new(RunDir(out), cfg).validate_chain(RunDir(out))
    return manifest
