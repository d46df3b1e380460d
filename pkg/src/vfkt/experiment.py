"""Experiment orchestration: configs, the end-to-end pipeline, sweeps.

A run is fully determined by its config: every random draw flows from the
config seed, reports serialize without timing by default, and rerunning a
config reproduces report files byte for byte. Protocol traffic from the
federated step is recorded per run so privacy and communication contracts
can be asserted (or audited) from the trace alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import lkt as lkt_mod
from .bus import MessageBus
from .data import (DataError, FeatureMatrix, LabelVector, PartyState, load_csv,
                   psi_intersect, split_partitions, standardize)
from .downstream import (CONDITIONS, RunReport, SplitSpec, config_fingerprint,
                         evaluate, stratified_split, train_classifier)
from .frl import run_frl
from .lkt import LktConfig
from .synthetic import SyntheticSpec, generate_synthetic


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FrlParams:
    method: str = "fedsvd"  # fedsvd | vfedpca
    block_size: int | None = None
    iter_num: int = 100
    period_num: int = 10
    warm_start: bool = True
    rank: int | None = None

    def __post_init__(self):
        if self.method not in ("fedsvd", "vfedpca"):
            raise ConfigError(f"unknown FRL method {self.method!r}")


@dataclass(frozen=True)
class DownstreamParams:
    model: str = "logistic"  # logistic | mlp
    train_fraction: float = 0.8
    few_shot_fraction: float | None = None
    n_seeds: int = 10
    epochs: int | None = None  # None -> per-model default
    learning_rate: float | None = None

    def __post_init__(self):
        if self.model not in ("logistic", "mlp"):
            raise ConfigError(f"unknown downstream model {self.model!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass(frozen=True)
class CsvSource:
    task_path: str
    data_paths: tuple[str, ...]
    id_column: str = "id"
    label_column: str = "y"


@dataclass(frozen=True)
class ExperimentConfig:
    synthetic: SyntheticSpec | None = None
    csv: CsvSource | None = None
    ol_columns: tuple[str, ...] | None = None  # cross-domain column split
    nl_columns: tuple[str, ...] | None = None
    standardize_features: bool = True
    frl: FrlParams = field(default_factory=FrlParams)
    lkt: LktConfig = field(default_factory=LktConfig)
    downstream: DownstreamParams = field(default_factory=DownstreamParams)
    conditions: tuple[str, ...] = ("local", "unitrans")
    seed: int = 0

    def __post_init__(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("exactly one of synthetic/csv sources must be set")
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}; valid: {CONDITIONS}")

    def to_dict(self) -> dict:
        lk = self.lkt
        return {
            "synthetic": self.synthetic.to_dict() if self.synthetic else None,
            "csv": {
                "task_path": self.csv.task_path,
                "data_paths": list(self.csv.data_paths),
                "id_column": self.csv.id_column,
                "label_column": self.csv.label_column,
            } if self.csv else None,
            "ol_columns": list(self.ol_columns) if self.ol_columns else None,
            "nl_columns": list(self.nl_columns) if self.nl_columns else None,
            "standardize_features": self.standardize_features,
            "frl": {
                "method": self.frl.method, "block_size": self.frl.block_size,
                "iter_num": self.frl.iter_num, "period_num": self.frl.period_num,
                "warm_start": self.frl.warm_start, "rank": self.frl.rank,
            },
            "lkt": {
                "latent_dim": lk.latent_dim, "mi_weight": lk.mi_weight,
                "beta_recons": lk.beta_recons, "beta_mi": lk.beta_mi,
                "temperature": lk.temperature, "learning_rate": lk.learning_rate,
                "batch_size": lk.batch_size, "epochs": lk.epochs,
                "finetune_epochs": lk.finetune_epochs, "finetune_lr": lk.finetune_lr,
                "reconstruction_source": lk.reconstruction_source,
                "hidden_width": lk.hidden_width,
                "mine_hidden": list(lk.mine_hidden),
                "mine_activation": lk.mine_activation,
            },
            "downstream": {
                "model": self.downstream.model,
                "train_fraction": self.downstream.train_fraction,
                "few_shot_fraction": self.downstream.few_shot_fraction,
                "n_seeds": self.downstream.n_seeds,
                "epochs": self.downstream.epochs,
                "learning_rate": self.downstream.learning_rate,
            },
            "conditions": list(self.conditions),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        synth = SyntheticSpec.from_dict(d["synthetic"]) if d.get("synthetic") else None
        csv_doc = d.get("csv")
        csv_src = CsvSource(
            task_path=csv_doc["task_path"],
            data_paths=tuple(csv_doc["data_paths"]),
            id_column=csv_doc.get("id_column", "id"),
            label_column=csv_doc.get("label_column", "y"),
        ) if csv_doc else None
        lk = d.get("lkt", {})
        lkt_cfg = LktConfig(
            latent_dim=lk.get("latent_dim"), mi_weight=lk.get("mi_weight", 0.1),
            beta_recons=lk.get("beta_recons"), beta_mi=lk.get("beta_mi"),
            temperature=lk.get("temperature", 0.5),
            learning_rate=lk.get("learning_rate", 1e-3),
            batch_size=lk.get("batch_size", 100), epochs=lk.get("epochs", 30),
            finetune_epochs=lk.get("finetune_epochs", 5),
            finetune_lr=lk.get("finetune_lr", 1e-4),
            reconstruction_source=lk.get("reconstruction_source", "auto"),
            hidden_width=lk.get("hidden_width"),
            mine_hidden=tuple(lk.get("mine_hidden", (64, 64))),
            mine_activation=lk.get("mine_activation", "relu"),
        )
        fr = d.get("frl", {})
        ds = d.get("downstream", {})
        return cls(
            synthetic=synth,
            csv=csv_src,
            ol_columns=tuple(d["ol_columns"]) if d.get("ol_columns") else None,
            nl_columns=tuple(d["nl_columns"]) if d.get("nl_columns") else None,
            standardize_features=d.get("standardize_features", True),
            frl=FrlParams(method=fr.get("method", "fedsvd"), block_size=fr.get("block_size"),
                          iter_num=fr.get("iter_num", 100), period_num=fr.get("period_num", 10),
                          warm_start=fr.get("warm_start", True), rank=fr.get("rank")),
            lkt=lkt_cfg,
            downstream=DownstreamParams(
                model=ds.get("model", "logistic"),
                train_fraction=ds.get("train_fraction", 0.8),
                few_shot_fraction=ds.get("few_shot_fraction"),
                n_seeds=ds.get("n_seeds", 10),
                epochs=ds.get("epochs"),
                learning_rate=ds.get("learning_rate")),
            conditions=tuple(d.get("conditions", ("local", "unitrans"))),
            seed=d.get("seed", 0),
        )

    @property
    def config_hash(self) -> str:
        return config_fingerprint(self.to_dict())


@dataclass
class Dataset:
    task: PartyState
    data_parties: list[PartyState]


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.synthetic is not None:
        task, data_parties = generate_synthetic(cfg.synthetic)
    else:
        t_feat, t_labels = load_csv(cfg.csv.task_path, cfg.csv.id_column, cfg.csv.label_column)
        task = PartyState(party_id="task", role="task", features=t_feat, labels=t_labels)
        data_parties = []
        for k, p in enumerate(cfg.csv.data_paths):
            feat, _ = load_csv(p, cfg.csv.id_column, None)
            data_parties.append(PartyState(party_id=f"data-{k}", role="data", features=feat))
    if cfg.standardize_features:
        task = PartyState(party_id=task.party_id, role="task",
                          features=standardize(task.features)[0], labels=task.labels)
        data_parties = [
            PartyState(party_id=p.party_id, role="data", features=standardize(p.features)[0])
            for p in data_parties
        ]
    return Dataset(task=task, data_parties=data_parties)


@dataclass
class PipelineResult:
    accuracy: float
    models: list
    bus: MessageBus
    augmented_columns: int


def _train_pair_models(cfg: ExperimentConfig, condition: str, dataset: Dataset,
                       h_t_nl: FeatureMatrix, run_seed: int, bus: MessageBus):
    """Steps 1-2 for every task/data-party pair; returns fine-tuned models."""
    lkt_cfg = cfg.lkt
    if condition == "ablation-no-mi":
        lkt_cfg = replace(lkt_cfg, mi_weight=0.0, beta_mi=0.0 if lkt_cfg.beta_mi is not None else None)
    models, h_feds = [], []
    for k, party in enumerate(dataset.data_parties):
        overlap = psi_intersect(dataset.task.features.ids, party.features.ids)
        if overlap.size == 0:
            raise DataError(
                f"no overlapping samples with {party.party_id}; "
                "transfer requires a non-empty intersection")
        h_t_ol, _, _ = split_partitions(
            dataset.task, overlap,
            ol_columns=list(cfg.ol_columns) if cfg.ol_columns else None)
        party_matrices = {
            dataset.task.party_id: h_t_ol.values,
            party.party_id: party.features.values[overlap.data_rows],
        }
        h_fed = run_frl(bus, cfg.frl.method, dataset.task.party_id, party_matrices,
                        overlap, seed=run_seed * 1000 + k,
                        block_size=cfg.frl.block_size, rank=cfg.frl.rank,
                        iter_num=cfg.frl.iter_num, period_num=cfg.frl.period_num,
                        warm_start=cfg.frl.warm_start)
        # Pair models share the run-level training seed: identical data
        # hospitals then yield identical pre-fine-tune encoders, so any
        # divergence between blocks is attributable to the fine-tune phase.
        model = lkt_mod.lkt_train(h_t_ol, h_t_nl, h_fed, lkt_cfg,
                                  seed=run_seed * 1000 + 500,
                                  provenance=party.party_id)
        models.append(model)
        h_feds.append(h_fed)
    if condition != "ablation-no-cl" and len(models) >= 1:
        models = lkt_mod.lkt_finetune_contrastive(models, h_t_nl, h_feds, lkt_cfg,
                                                  seed=run_seed * 1000 + 999)
    return models, h_feds


def run_pipeline_once(cfg: ExperimentConfig, condition: str, dataset: Dataset,
                      run_seed: int) -> PipelineResult:
    """One seed of one condition: PSI -> FRL -> LKT -> augment -> train -> evaluate."""
    bus = MessageBus()
    # the non-overlap partition is shared across pairs (union of overlaps removed)
    union_overlap = set()
    for party in dataset.data_parties:
        union_overlap.update(set(dataset.task.features.ids) & set(party.features.ids))
    nl_idx = [i for i, sid in enumerate(dataset.task.features.ids) if sid not in union_overlap]
    if not nl_idx:
        raise DataError("task party has no non-overlapping samples to augment")
    h_t_nl = dataset.task.features.select_rows(nl_idx)
    if cfg.nl_columns:
        h_t_nl = h_t_nl.select_columns(list(cfg.nl_columns))
    y_nl = dataset.task.labels.select_rows(nl_idx)

    models: list = []
    if condition == "local":
        x = h_t_nl.values
    else:
        models, _ = _train_pair_models(cfg, condition, dataset, h_t_nl, run_seed, bus)
        x = lkt_mod.augment(models, h_t_nl).matrix.values

    split = SplitSpec(train_fraction=cfg.downstream.train_fraction,
                      few_shot_fraction=cfg.downstream.few_shot_fraction,
                      seed=run_seed)
    train_idx, test_idx = stratified_split(y_nl.labels, split)
    clf = train_classifier(x[train_idx], y_nl.labels[train_idx], cfg.downstream.model,
                           seed=run_seed, num_classes=y_nl.num_classes,
                           epochs=cfg.downstream.epochs, lr=cfg.downstream.learning_rate)
    acc = evaluate(clf, x[test_idx], y_nl.labels[test_idx])
    return PipelineResult(accuracy=acc, models=models, bus=bus,
                          augmented_columns=x.shape[1])


def run_condition(cfg: ExperimentConfig, condition: str, dataset: Dataset | None = None,
                  axis: str | None = None, value=None):
    """All seeds of one condition. Returns (RunReport, results per seed)."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    if dataset is None:
        dataset = prepare_dataset(cfg)
    seeds = [cfg.seed + i for i in range(cfg.downstream.n_seeds)]
    results = []
    t0 = time.perf_counter()
    for s in seeds:
        try:
            results.append(run_pipeline_once(cfg, condition, dataset, s))
        except Exception as exc:
            raise RuntimeError(f"pipeline failed (condition={condition}, seed={s}): {exc}") from exc
    wall = time.perf_counter() - t0
    report = RunReport(condition=condition, seeds=seeds,
                       accuracies=[r.accuracy for r in results],
                       config_hash=cfg.config_hash, axis=axis, value=value,
                       wall_clock_s=wall)
    return report, results


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Execute every configured condition; optionally persist reports,
    the message trace, and a checkpoint of the first transfer models."""
    dataset = prepare_dataset(cfg)
    reports = []
    checkpoint_models = None
    trace_records = []
    for condition in cfg.conditions:
        report, results = run_condition(cfg, condition, dataset)
        reports.append(report)
        for s, r in zip(report.seeds, results):
            for rec in r.bus.trace:
                trace_records.append({"condition": condition, "seed": s, **rec})
        if condition != "local" and checkpoint_models is None and results[0].models:
            checkpoint_models = results[0].models
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for report in reports:
            (out / f"report_{report.condition}.json").write_text(report.to_json())
        with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
            for rec in trace_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2))
        if checkpoint_models is not None:
            lkt_mod.save_models(out / "models.json", checkpoint_models, cfg.config_hash)
    return reports


def add_data_hospital(models: list, cfg: ExperimentConfig, dataset: Dataset,
                      new_party: PartyState, run_seed: int):
    """Extend an existing run with one more data party.

    Runs the federated step and pair training for the new party only, then
    reruns contrastive fine-tuning over all encoders. Existing pair models
    are otherwise untouched. Returns (models, bus).
    """
    for m in models:
        if tuple(m.nl_columns) != _nl_schema(cfg, dataset):
            raise DataError("checkpoint schema incompatible with this dataset")
    bus = MessageBus()
    extended = Dataset(task=dataset.task, data_parties=[new_party])
    union_overlap = set()
    for party in dataset.data_parties + [new_party]:
        union_overlap.update(set(dataset.task.features.ids) & set(party.features.ids))
    nl_idx = [i for i, sid in enumerate(dataset.task.features.ids) if sid not in union_overlap]
    h_t_nl = dataset.task.features.select_rows(nl_idx)
    if cfg.nl_columns:
        h_t_nl = h_t_nl.select_columns(list(cfg.nl_columns))
    if h_t_nl.columns != models[0].nl_columns:
        raise DataError("non-overlap schema changed since the checkpoint")
    new_models, new_feds = _train_pair_models(cfg, "ablation-no-cl", extended, h_t_nl,
                                              run_seed, bus)
    all_models = [m.copy() for m in models] + new_models
    # fine-tune over all encoders; targets recomputed from each model's phi
    h_feds = _recover_feds(cfg, dataset, new_party, all_models, run_seed, h_t_nl)
    all_models = lkt_mod.lkt_finetune_contrastive(all_models, h_t_nl, h_feds, cfg.lkt,
                                                  seed=run_seed * 1000 + 999)
    return all_models, bus


def _nl_schema(cfg: ExperimentConfig, dataset: Dataset):
    if cfg.nl_columns:
        return tuple(cfg.nl_columns)
    return dataset.task.features.columns


def _recover_feds(cfg, dataset, new_party, all_models, run_seed, h_t_nl):
    """Local (offline) recomputation of per-pair federated representations
    for fine-tuning targets: reruns no cross-party protocol, it reuses the
    task party's stored overlap blocks."""
    feds = []
    silent = MessageBus()
    for k, party in enumerate(dataset.data_parties + [new_party]):
        overlap = psi_intersect(dataset.task.features.ids, party.features.ids)
        h_t_ol, _, _ = split_partitions(
            dataset.task, overlap,
            ol_columns=list(cfg.ol_columns) if cfg.ol_columns else None)
        party_matrices = {
            dataset.task.party_id: h_t_ol.values,
            party.party_id: party.features.values[overlap.data_rows],
        }
        feds.append(run_frl(silent, cfg.frl.method, dataset.task.party_id, party_matrices,
                            overlap, seed=run_seed * 1000 + k,
                            block_size=cfg.frl.block_size, rank=cfg.frl.rank,
                            iter_num=cfg.frl.iter_num, period_num=cfg.frl.period_num,
                            warm_start=cfg.frl.warm_start))
    return feds


SWEEP_AXES = ("task_features", "data_features", "overlap_count", "num_data_hospitals")


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None):
    """One run per axis value per condition; wall clock recorded per value."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {SWEEP_AXES}")
    if cfg.synthetic is None:
        raise ConfigError("sweeps require a synthetic dataset source")
    reports = []
    timings = []
    for v in values:
        v = int(v)
        spec = cfg.synthetic
        if axis == "task_features":
            spec = replace(spec, task_features=v)
        elif axis == "data_features":
            spec = replace(spec, data_features=tuple([v] * len(spec.data_features)))
        elif axis == "overlap_count":
            if v >= spec.n_task_samples:
                raise ConfigError(
                    f"sweep axis overlap_count: value {v} >= n_task_samples")
            spec = replace(spec, overlap_count=v)
        elif axis == "num_data_hospitals":
            spec = replace(spec, data_features=tuple([spec.data_features[0]] * v))
        sub_cfg = replace(cfg, synthetic=spec)
        dataset = prepare_dataset(sub_cfg)
        t0 = time.perf_counter()
        for condition in cfg.conditions:
            report, _ = run_condition(sub_cfg, condition, dataset, axis=axis, value=v)
            reports.append(report)
        timings.append({"axis": axis, "value": v,
                        "wall_clock_s": time.perf_counter() - t0})
        if out_dir is not None:
            out = Path(out_dir) / f"{axis}_{v}"
            out.mkdir(parents=True, exist_ok=True)
            for report in reports[-len(cfg.conditions):]:
                (out / f"report_{report.condition}.json").write_text(report.to_json())
    if out_dir is not None:
        Path(out_dir, "timings.json").write_text(json.dumps(timings, indent=2))
    return reports, timings


def render_reports(reports: list[RunReport], fmt: str = "md") -> str:
    """Comparison table: one row per (condition, axis value)."""
    rows = [
        {
            "condition": r.condition,
            "axis": r.axis or "",
            "value": "" if r.value is None else r.value,
            "mean": round(r.mean, 4),
            "std": round(r.std, 4),
            "seeds": len(r.seeds),
        }
        for r in reports
    ]
    if fmt == "json":
        return json.dumps(rows, indent=2)
    if fmt == "csv":
        lines = ["condition,axis,value,mean,std,seeds"]
        lines += [f'{r["condition"]},{r["axis"]},{r["value"]},{r["mean"]},{r["std"]},{r["seeds"]}'
                  for r in rows]
        return "\n".join(lines) + "\n"
    if fmt == "md":
        lines = ["| condition | axis | value | accuracy (mean ± std) | seeds |",
                 "|---|---|---|---|---|"]
        lines += [
            f'| {r["condition"]} | {r["axis"]} | {r["value"]} | '
            f'{r["mean"]:.4f} ± {r["std"]:.4f} | {r["seeds"]} |'
            for r in rows
        ]
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")
