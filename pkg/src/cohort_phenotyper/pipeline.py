"""End-to-end run: preprocess, rank, fit, embed, cluster, phenotype, metrics.

Every stage writes its artifacts into the output directory and records
their SHA-256 hashes in ``manifest.json``.  The manifest's ``payload`` (seed,
config, per-stage input and output hashes) is byte-identical between runs
with the same config; wall-clock durations live beside it under ``timing``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import plots
from .cluster import (GmmConfig, assign_clusters, compare_clusters, gmm_fit_em, per_feature_kld,
                      select_k, trajectory_distances)
from .cohort import Cohort, read_cohort, summarize_by_outcome, write_cohort
from .errors import PhenotyperError, StageFailed, ValidationError
from .evaluation import cross_validate, evaluate_by_stratum, metrics_frame
from .forest import ForestConfig, rank_features
from .lgmm import FitConfig, LgmmDesign, lgmm_fit, lr_fit_per_visit, wald_frame, wald_table
from .preprocess import (FeatureMatrix, augment_quadratic, encode_categoricals, impute_knn,
                         mahalanobis_outliers, smote_oversample)
from .synth import SynthConfig, generate_cohort, reference_config
from .tsne import TsneConfig, tsne_embed

STAGES = ("preprocess", "rank", "fit", "embed", "cluster", "phenotype", "metrics")
_TSNE_KEYS = {f.name for f in dataclasses.fields(TsneConfig)} - {"seed"}
_GMM_KEYS = {f.name for f in dataclasses.fields(GmmConfig)} - {"seed", "n_jobs"}


@dataclass
class PipelineConfig:
    """Inputs, knobs and output directory for :func:`run_pipeline`.

    With no ``cohort_csv`` the cohort is simulated from ``synth`` (a
    synthetic-cohort config dict) or, when that is absent too, from the
    360-subject reference cohort at ``seed``.
    """

    cohort_csv: str | None = None
    schema_json: str | None = None
    synth: dict | None = None
    seed: int = 2024
    out_dir: str = "report"
    impute_k: int = 5
    outlier_alpha: float = 0.001
    drop_outliers: bool = False
    smote_percent: int = 100
    smote_classes: str = "minority"
    smote_k: int = 5
    quadratic: list[str] = field(default_factory=list)
    n_top: int = 20
    n_trees: int = 100
    folds: int = 5
    features: list[str] | None = None
    model: str = "both"
    visit: int | None = None
    quad_points: int = 15
    tsne: dict = field(default_factory=dict)
    gmm: dict = field(default_factory=dict)
    k: int | str = 2
    k_range: list[int] = field(default_factory=lambda: [1, 6])
    subgroups: list[int] = field(default_factory=lambda: [1, 3])
    subgroup_top: int = 10
    subgroup_smote_percent: int = 500
    threshold: float = 0.5
    plots: bool = True
    n_jobs: int | None = None

    def __post_init__(self):
        if (self.cohort_csv is None) != (self.schema_json is None):
            raise ValidationError("cohort_csv and schema_json go together")
        if self.smote_classes not in ("minority", "both"):
            raise ValidationError("smote_classes must be 'minority' or 'both'")
        if self.model not in ("lgmm", "lr", "both"):
            raise ValidationError("model must be 'lgmm', 'lr' or 'both'")
        if not (self.k == "auto" or (isinstance(self.k, int) and self.k >= 1)):
            raise ValidationError("k must be 'auto' or a positive integer")
        if len(self.k_range) != 2 or not 1 <= self.k_range[0] <= self.k_range[1]:
            raise ValidationError("k_range must be [low, high] with 1 <= low <= high")
        for name in ("impute_k", "n_top", "n_trees", "folds", "quad_points", "smote_k"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError("threshold must be in (0, 1)")
        bad = set(self.tsne) - _TSNE_KEYS
        if bad:
            raise ValidationError(f"unknown tsne keys: {sorted(bad)}")
        bad = set(self.gmm) - _GMM_KEYS
        if bad:
            raise ValidationError(f"unknown gmm keys: {sorted(bad)}")
        if self.synth is not None:
            SynthConfig.from_dict(self.synth)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def k_values(self) -> range:
        return range(self.k_range[0], self.k_range[1] + 1)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict
    artifacts: dict = field(default_factory=dict)


class _Run:
    """Mutable state shared by the stages of one pipeline run."""

    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self.out = Path(config.out_dir)
        self.stages: list[dict] = []
        self.timing: dict[str, float] = {}
        self.notes: dict[str, list[str]] = {}
        self.art: dict = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def stage(self, name, fn, inputs=()):
        t0 = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                outputs = fn()
            except StageFailed:
                raise
            except (PhenotyperError, OSError, ValueError, np.linalg.LinAlgError) as exc:
                self.timing[name] = time.perf_counter() - t0
                self.stages.append({"stage": name, "status": "failed", "error": str(exc)})
                self.write_manifest()
                raise StageFailed(name, exc) from exc
        msgs = [f"{w.category.__name__}: {w.message}" for w in caught]
        if msgs:
            self.notes.setdefault(name, []).extend(msgs)
        self.timing[name] = time.perf_counter() - t0
        self.stages.append({
            "stage": name,
            "status": "ok",
            "inputs": {k: sha256_file(self.path(k)) for k in inputs},
            "outputs": {k: sha256_file(self.path(k)) for k in outputs},
        })

    def payload(self) -> dict:
        cfg = self.cfg.to_dict()
        cfg.pop("out_dir")
        return {"seed": self.cfg.seed, "config": cfg, "stages": self.stages}

    def write_manifest(self) -> dict:
        payload = self.payload()
        text = json.dumps(payload, sort_keys=True, default=_json_default)
        manifest = {
            "payload": payload,
            "payload_sha256": hashlib.sha256(text.encode()).hexdigest(),
            "timing_seconds": self.timing,
        }
        write_json(manifest, self.path("manifest.json"))
        return manifest


def _matrix_frame(cohort: Cohort, matrix: FeatureMatrix) -> pd.DataFrame:
    df = pd.DataFrame(matrix.values, columns=matrix.names)
    df.insert(0, "visit", cohort.visit)
    df.insert(0, "subject_id", cohort.subject_id)
    df["outcome"] = cohort.outcome
    return df


def _stage_preprocess(run: _Run):
    cfg = run.cfg
    written = []
    if cfg.cohort_csv is not None:
        for p in (cfg.cohort_csv, cfg.schema_json):
            if not Path(p).is_file():
                raise FileNotFoundError(f"input file not found: {p}")
        cohort = read_cohort(cfg.cohort_csv, cfg.schema_json)
    else:
        sc = SynthConfig.from_dict(cfg.synth) if cfg.synth is not None else reference_config(cfg.seed)
        cohort, truth = generate_cohort(sc)
        write_json(truth.to_dict(), run.path("truth.json"))
        written.append("truth.json")
    write_cohort(cohort, run.path("cohort.csv"), run.path("schema.json"))
    written += ["cohort.csv", "schema.json"]
    summarize_by_outcome(cohort).formatted().to_csv(run.path("descriptive.csv"))
    written.append("descriptive.csv")

    matrix, codebook = encode_categoricals(cohort)
    write_json(codebook.to_dict(), run.path("codebook.json"))
    matrix = impute_knn(matrix, cfg.impute_k)
    cont = [j for j, k in enumerate(matrix.kinds) if k == "continuous"]
    report = mahalanobis_outliers(matrix.values[:, cont], cfg.outlier_alpha)
    write_json(report.to_dict(), run.path("outliers.json"))
    if cfg.drop_outliers and report.flags.any():
        keep = ~report.flags
        cohort = cohort.subset(keep)
        matrix = dataclasses.replace(matrix, values=matrix.values[keep], missing=matrix.missing[keep],
                                     imputed=matrix.imputed[keep])
    if cfg.quadratic:
        matrix = augment_quadratic(matrix, cfg.quadratic)
    _matrix_frame(cohort, matrix).to_csv(run.path("preprocessed.csv"), index=False)
    written += ["codebook.json", "outliers.json", "preprocessed.csv"]
    if cfg.smote_percent:
        res = smote_oversample(matrix.values, cohort.outcome, cfg.smote_percent, cfg.smote_k,
                               seed=cfg.seed, classes=cfg.smote_classes,
                               categorical=matrix.discrete)
        df = pd.DataFrame(res.X, columns=matrix.names)
        df["outcome"] = res.y
        df["provenance"] = np.where(res.synthetic, "synthetic", "original")
        df["parent_row"] = res.parent
        df.to_csv(run.path("oversampled.csv"), index=False)
        written.append("oversampled.csv")
    run.art.update(cohort=cohort, matrix=matrix)
    return written


def _stage_rank(run: _Run):
    cfg, cohort, matrix = run.cfg, run.art["cohort"], run.art["matrix"]
    if cfg.features is not None:
        unknown = [f for f in cfg.features if f not in matrix.names]
        if unknown:
            raise ValidationError(f"unknown features {unknown}")
        top = list(cfg.features)
        write_json({"source": "config", "features": top}, run.path("top_features.json"))
        run.art["top"] = top
        return ["top_features.json"]
    table = rank_features(matrix, cohort.outcome, cohort.subject_id, n_top=cfg.n_top,
                          folds=cfg.folds, config=ForestConfig(cfg.n_trees, seed=cfg.seed,
                                                               n_jobs=cfg.n_jobs),
                          smote_percent=cfg.smote_percent, smote_classes=cfg.smote_classes,
                          smote_k=cfg.smote_k, seed=cfg.seed)
    table.to_frame().to_csv(run.path("importance.csv"), index=False)
    write_json({"source": "random_forest", "features": table.top}, run.path("top_features.json"))
    out = ["importance.csv", "top_features.json"]
    if cfg.plots:
        plots.importance_bars(table, run.path("importance.svg"))
        out.append("importance.svg")
    run.art.update(top=table.top, importance=table)
    return out


def _design(run: _Run) -> LgmmDesign:
    cohort, matrix = run.art["cohort"], run.art["matrix"]
    return LgmmDesign.from_matrix(matrix, cohort.subject_id, cohort.outcome, run.art["top"],
                                  visits=cohort.visit)


def _stage_fit(run: _Run):
    cfg = run.cfg
    design = _design(run)
    fc = FitConfig(quad_points=cfg.quad_points)
    out = []
    if cfg.model in ("lgmm", "both"):
        fit = lgmm_fit(design, fc)
        write_json(fit.to_dict(), run.path("lgmm_fit.json"))
        wald_frame(wald_table(fit)).to_csv(run.path("wald_lgmm.csv"), index=False)
        out += ["lgmm_fit.json", "wald_lgmm.csv"]
        run.art["lgmm"] = fit
    if cfg.model in ("lr", "both"):
        visits = [cfg.visit] if cfg.visit is not None else sorted(set(design.visits.tolist()))
        for v in visits:
            fit = lr_fit_per_visit(design, v, fc)
            write_json(fit.to_dict(), run.path(f"lr_visit{v}.json"))
            wald_frame(wald_table(fit)).to_csv(run.path(f"wald_lr_visit{v}.csv"), index=False)
            out += [f"lr_visit{v}.json", f"wald_lr_visit{v}.csv"]
    return out


def _stage_embed(run: _Run):
    cfg, cohort, matrix = run.cfg, run.art["cohort"], run.art["matrix"]
    emb = tsne_embed(matrix.columns(run.art["top"]), TsneConfig(**cfg.tsne, seed=cfg.seed))
    pd.DataFrame({"subject_id": cohort.subject_id, "visit": cohort.visit,
                  "y1": emb.coords[:, 0], "y2": emb.coords[:, 1]}).to_csv(
        run.path("embedding.csv"), index=False)
    pd.DataFrame({"iteration": np.arange(len(emb.cost_trace)), "kl": emb.cost_trace}).to_csv(
        run.path("cost_trace.csv"), index=False)
    run.art["embedding"] = emb
    return ["embedding.csv", "cost_trace.csv"]


def _stage_cluster(run: _Run):
    cfg, cohort = run.cfg, run.art["cohort"]
    Y = run.art["embedding"].coords
    gcfg = GmmConfig(**cfg.gmm, seed=cfg.seed, n_jobs=cfg.n_jobs)
    best, models = select_k(Y, cfg.k_values, gcfg)
    K = best if cfg.k == "auto" else int(cfg.k)
    model = models[K] if K in models else gmm_fit_em(Y, K, gcfg)
    assign = assign_clusters(model, Y)
    bic = pd.DataFrame({"K": list(models), "bic": [m.bic for m in models.values()],
                        "loglik": [m.loglik for m in models.values()]})
    bic.to_csv(run.path("bic.csv"), index=False)
    doc = model.to_dict()
    doc.update(selection=cfg.k if cfg.k != "auto" else "auto", bic_best_k=best)
    write_json(doc, run.path("gmm.json"))
    df = pd.DataFrame({"subject_id": cohort.subject_id, "visit": cohort.visit,
                       "cluster": assign.labels + 1})
    for k in range(model.K):
        df[f"resp_{k + 1}"] = assign.responsibilities[:, k]
    df.to_csv(run.path("assignments.csv"), index=False)
    out = ["bic.csv", "gmm.json", "assignments.csv"]
    if cfg.plots:
        plots.bic_curve(list(models), bic["bic"], run.path("bic.svg"))
        plots.embedding_scatter(Y, assign.labels, run.path("embedding.svg"))
        out += ["bic.svg", "embedding.svg"]
    run.art.update(gmm=model, labels=assign.labels)
    return out


def _row_groups(cohort: Cohort) -> np.ndarray:
    groups = cohort.outcome_groups()
    return np.array([groups.get(s, -1) for s in cohort.subject_id])


def _stage_phenotype(run: _Run):
    cfg, cohort, matrix = run.cfg, run.art["cohort"], run.art["matrix"]
    labels, Y = run.art["labels"], run.art["embedding"].coords
    groups = _row_groups(cohort)
    traj = trajectory_distances(Y, cohort.subject_id, cohort.visit, labels, groups,
                                K=run.art["gmm"].K)
    doc = traj.to_dict()
    doc["summary"] = traj.describe()
    write_json(doc, run.path("trajectory.json"))
    out = ["trajectory.json"]
    if len(np.unique(labels)) >= 2:
        kld = per_feature_kld(matrix, labels, 0, 1)
        kld.to_frame().to_csv(run.path("kld.csv"), index=False)
        compare_clusters(matrix, labels, 0, 1).to_csv(run.path("comparison.csv"), index=False)
        out += ["kld.csv", "comparison.csv"]
        if cfg.plots:
            plots.kld_bars(kld, run.path("kld.svg"))
            out.append("kld.svg")
    else:
        run.notes.setdefault("phenotype", []).append(
            "single cluster: KLD and cluster comparison skipped")
    if cfg.plots:
        plots.trajectory_paths(Y, cohort.subject_id, cohort.visit, groups, run.path("trajectory.svg"))
        out.append("trajectory.svg")
    return out


def _subgroup_metrics(run: _Run, g: int) -> dict:
    """Per-group model: both classes oversampled, features re-ranked within the group."""
    cfg, cohort, matrix = run.cfg, run.art["cohort"], run.art["matrix"]
    members = [s for s, code in cohort.outcome_groups().items() if code == g]
    mask = np.isin(cohort.subject_id, members)
    sub = dataclasses.replace(matrix, values=matrix.values[mask], missing=matrix.missing[mask],
                              imputed=matrix.imputed[mask])
    y, sids, visits = cohort.outcome[mask], cohort.subject_id[mask], cohort.visit[mask]
    table = rank_features(sub, y, sids, n_top=cfg.subgroup_top, folds=cfg.folds,
                          config=ForestConfig(cfg.n_trees, seed=cfg.seed, n_jobs=cfg.n_jobs),
                          smote_percent=cfg.subgroup_smote_percent, smote_classes="both",
                          smote_k=cfg.smote_k, seed=cfg.seed)
    cv = cross_validate(sub, y, sids, visits, table.top, cfg.folds, cfg.seed,
                        cfg.subgroup_smote_percent, "both", cfg.smote_k,
                        FitConfig(quad_points=cfg.quad_points), models=("lgmm",),
                        threshold=cfg.threshold)
    return {"group": g, "n_subjects": len(members), "features": table.top,
            "pooled": cv.pooled["lgmm"].to_dict(), "notes": cv.notes}


def _stage_metrics(run: _Run):
    cfg, cohort, matrix = run.cfg, run.art["cohort"], run.art["matrix"]
    models = {"both": ("lgmm", "lr"), "lgmm": ("lgmm",), "lr": ("lr",)}[cfg.model]
    cv = cross_validate(matrix, cohort.outcome, cohort.subject_id, cohort.visit, run.art["top"],
                        cfg.folds, cfg.seed, cfg.smote_percent, cfg.smote_classes, cfg.smote_k,
                        FitConfig(quad_points=cfg.quad_points), models=models,
                        threshold=cfg.threshold)
    cv.predictions.to_csv(run.path("cv_predictions.csv"), index=False)
    cv.comparison().to_csv(run.path("model_comparison.csv"))
    groups = cohort.outcome_groups()
    by_visit = {m: evaluate_by_stratum(cv.predictions, "visit", model=m) for m in models}
    by_group = {m: evaluate_by_stratum(cv.predictions[cv.predictions["subject_id"].isin(groups)],
                                       "group", groups=groups, model=m) for m in models}
    pd.concat([metrics_frame(r).assign(model=m) for m, r in by_visit.items()]).to_csv(
        run.path("metrics_by_visit.csv"), index=False)
    pd.concat([metrics_frame(r).assign(model=m) for m, r in by_group.items()]).to_csv(
        run.path("metrics_by_group.csv"), index=False)
    subgroups = []
    for g in cfg.subgroups:
        try:
            subgroups.append(_subgroup_metrics(run, g))
        except PhenotyperError as exc:
            subgroups.append({"group": g, "skipped": f"{type(exc).__name__}: {exc}"})
    doc = {
        "threshold": cfg.threshold,
        "folds": cfg.folds,
        "features": cv.features,
        "pooled": {m: r.to_dict() for m, r in cv.pooled.items()},
        "per_fold": {m: [r.to_dict() for r in rs] for m, rs in cv.per_fold.items()},
        "training_rows": [{k: v for k, v in t.items() if k != "synthetic_ids"} for t in cv.training],
        "subgroups": subgroups,
        "notes": cv.notes,
    }
    write_json(doc, run.path("metrics.json"))
    return ["cv_predictions.csv", "model_comparison.csv", "metrics_by_visit.csv",
            "metrics_by_group.csv", "metrics.json"]


_STAGE_FUNCS = {
    "preprocess": (_stage_preprocess, ()),
    "rank": (_stage_rank, ("preprocessed.csv",)),
    "fit": (_stage_fit, ("preprocessed.csv", "top_features.json")),
    "embed": (_stage_embed, ("preprocessed.csv", "top_features.json")),
    "cluster": (_stage_cluster, ("embedding.csv",)),
    "phenotype": (_stage_phenotype, ("preprocessed.csv", "embedding.csv", "assignments.csv")),
    "metrics": (_stage_metrics, ("preprocessed.csv", "top_features.json")),
}


def run_pipeline(config: PipelineConfig, until: str | None = None) -> PipelineResult:
    """Run the stages in order (through ``until`` when given) and write the manifest."""
    if until is not None and until not in STAGES:
        raise ValidationError(f"unknown stage {until!r}; choose from {STAGES}")
    run = _Run(config)
    run.out.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        fn, inputs = _STAGE_FUNCS[name]
        run.stage(name, lambda: fn(run), inputs)
        if name == until:
            break
    write_json(run.notes, run.path("notes.json"))
    manifest = run.write_manifest()
    if until is None:
        write_summary(run.out)
    return PipelineResult(run.out, manifest, run.art)


def _read_json(path):
    return json.loads(Path(path).read_text()) if Path(path).is_file() else None


def _fmt(v):
    return "undefined" if v is None else f"{100 * v:.2f}%"


def write_summary(out_dir) -> Path:
    """Collect the headline tables of a finished run into ``summary.md``."""
    out = Path(out_dir)
    if not (out / "manifest.json").is_file():
        raise ValidationError(f"{out} holds no pipeline run (manifest.json missing)")
    lines = ["# Cohort phenotyping report", ""]
    manifest = _read_json(out / "manifest.json")
    lines += [f"Seed {manifest['payload']['seed']}; stages: "
              + ", ".join(s["stage"] for s in manifest["payload"]["stages"]), ""]
    top = _read_json(out / "top_features.json")
    if top:
        lines += ["## Selected features", "", ", ".join(top["features"]), ""]
    if (out / "wald_lgmm.csv").is_file():
        fit = _read_json(out / "lgmm_fit.json")
        lines += ["## Mixed-effects logistic model", "",
                  f"sigma_mu = {fit['sigma_mu']:.4f}, log-likelihood = {fit['loglik']:.3f}", "",
                  pd.read_csv(out / "wald_lgmm.csv", keep_default_na=False).to_string(index=False), ""]
    metrics = _read_json(out / "metrics.json")
    if metrics:
        lines += ["## Cross-validated performance (pooled out-of-fold)", ""]
        for m, r in metrics["pooled"].items():
            lines.append(f"- {m}: " + ", ".join(f"{k} {_fmt(r[k])}"
                                                for k in ("acc", "pre", "spec", "npv", "recall")))
        for s in metrics["subgroups"]:
            if "pooled" in s:
                r = s["pooled"]
                lines.append(f"- group {s['group']} model: acc {_fmt(r['acc'])}, "
                             f"spec {_fmt(r['spec'])}, recall {_fmt(r['recall'])}")
            else:
                lines.append(f"- group {s['group']} model skipped ({s['skipped']})")
        lines.append("")
    gmm = _read_json(out / "gmm.json")
    if gmm:
        lines += ["## Clusters", "",
                  f"K = {gmm['K']} (BIC minimum at K = {gmm['bic_best_k']}), "
                  f"weights {', '.join(f'{w:.3f}' for w in gmm['weights'])}", ""]
    if (out / "kld.csv").is_file():
        kld = pd.read_csv(out / "kld.csv").head(5)
        lines += ["Largest per-feature KL divergences: "
                  + ", ".join(f"{r.feature} ({r.kld:.3f})" for r in kld.itertuples()), ""]
    traj = _read_json(out / "trajectory.json")
    if traj:
        lines += ["## Trajectories", ""] + [f"- {s}" for s in traj["summary"]] + [""]
    path = out / "summary.md"
    path.write_text("\n".join(lines))
    return path
