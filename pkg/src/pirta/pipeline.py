"""Experiment configuration and the stage functions the CLI wires together."""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .data import LABELS, ImageRecord, TerritoryLabel, read_manifest, write_manifest
from .encoder import Checkpoint, EncoderConfig, encode_batch
from .phantom import PhantomConfig, generate_dataset, generate_unlabeled_pool, write_config
from .report import (
    DEFAULT_M,
    RadiologyReport,
    generate_report_oracle,
    render_prompt,
    report_territory_acc1,
)
from .retrieval import (
    EmbeddingIndex,
    RetrievalResult,
    query_batch,
    retrieval_table,
    silhouette_score,
    write_csv,
)
from .train import (
    DESK_FINETUNE,
    DESK_MAE,
    TrainConfig,
    finetune_classifier,
    label_from_logits,
    labels_tensor,
    predict_logits,
    pretrain_mae,
    stack_volumes,
)

CONDITIONS = ("no", "small", "large")


class MissingArtifact(FileNotFoundError):
    def __init__(self, what: str, path, command: str):
        super().__init__(f"{what} not found at {path}; run `pirta {command}` first")
        self.command = command


def _strict(cls, d: Mapping, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return d


@dataclass(frozen=True)
class Paths:
    data_dir: str = "runs/desk/data"
    checkpoint_dir: str = "runs/desk/checkpoints"
    index_path: str = "runs/desk/index/train"
    output_dir: str = "runs/desk/out"


@dataclass(frozen=True)
class ExperimentConfig:
    paths: Paths = field(default_factory=Paths)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train_per_class: int = 50
    test_per_class: int = 15
    extra_unlabeled: int = 2000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mae: TrainConfig = DESK_MAE
    finetune: TrainConfig = DESK_FINETUNE
    conditions: tuple[str, ...] = CONDITIONS
    # condition whose fine-tuned encoder backs build-index / retrieve / generate
    primary_condition: str = "large"
    ks: tuple[int, ...] = (1, 5, 10)
    m: int = DEFAULT_M
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        for c in self.conditions + (self.primary_condition,):
            if c not in CONDITIONS:
                raise ValueError(f"unknown pretrain condition {c!r}; choose from {CONDITIONS}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self, seed=seed, phantom=dataclasses.replace(self.phantom, seed=seed),
            mae=dataclasses.replace(self.mae, seed=seed),
            finetune=dataclasses.replace(self.finetune, seed=seed))

    def with_paths(self, root: str | Path) -> "ExperimentConfig":
        root = Path(root)
        return dataclasses.replace(self, paths=Paths(str(root / "data"), str(root / "checkpoints"),
                                                     str(root / "index" / "train"), str(root / "out")))

    def to_dict(self) -> dict:
        return {
            "paths": dataclasses.asdict(self.paths),
            "phantom": self.phantom.to_dict(),
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "extra_unlabeled": self.extra_unlabeled,
            "encoder": self.encoder.to_dict(),
            "mae": self.mae.to_dict(),
            "finetune": self.finetune.to_dict(),
            "conditions": list(self.conditions),
            "primary_condition": self.primary_condition,
            "ks": list(self.ks),
            "m": self.m,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(_strict(cls, d, "experiment config"))
        if "paths" in d:
            d["paths"] = Paths(**_strict(Paths, d["paths"], "paths"))
        if "phantom" in d:
            d["phantom"] = PhantomConfig.from_dict(d["phantom"])
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        for key, base in (("mae", DESK_MAE), ("finetune", DESK_FINETUNE)):
            if key in d:
                sub = _strict(TrainConfig, d[key], key)
                d[key] = dataclasses.replace(base, **sub)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# artifact paths


def manifest_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.data_dir) / "manifest.jsonl"


def mae_path(cfg: ExperimentConfig, condition: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / f"mae_{condition}"


def classifier_path(cfg: ExperimentConfig, condition: str) -> Path:
    return Path(cfg.paths.checkpoint_dir) / f"classifier_{condition}"


def index_path(cfg: ExperimentConfig, condition: Optional[str] = None) -> Path:
    if condition is None or condition == cfg.primary_condition:
        return Path(cfg.paths.index_path)
    p = Path(cfg.paths.index_path)
    return p.with_name(f"{p.name}_{condition}")


# ---------------------------------------------------------------------------
# stages


def make_dataset(cfg: ExperimentConfig) -> list[ImageRecord]:
    counts = {"train": {l: cfg.train_per_class for l in LABELS},
              "test": {l: cfg.test_per_class for l in LABELS}}
    return generate_dataset(counts, cfg.phantom)


def write_dataset(cfg: ExperimentConfig, records: Sequence[ImageRecord]) -> Path:
    out = write_manifest(records, cfg.paths.data_dir)
    write_config(cfg.phantom, Path(cfg.paths.data_dir) / "phantom.json")
    return out


def load_dataset(cfg: ExperimentConfig) -> tuple[list[ImageRecord], list[ImageRecord]]:
    path = manifest_path(cfg)
    if not path.exists():
        raise MissingArtifact("dataset manifest", path, "gen-data")
    records = read_manifest(path)
    return [r for r in records if r.split == "train"], [r for r in records if r.split == "test"]


def volumes(cfg: ExperimentConfig, records: Sequence[ImageRecord]) -> torch.Tensor:
    return stack_volumes(records, cfg.encoder.volume_dims, cfg.phantom.spacing)


def pretraining_pool(cfg: ExperimentConfig, condition: str, records: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Volumes for MAE: the training split alone (small) or with extra phantoms (large).

    Labels are never read. Test volumes are kept out so retrieval and
    classification are scored on images no stage has seen.
    """
    if condition == "small":
        return list(records)
    if condition == "large":
        return list(records) + generate_unlabeled_pool(cfg.extra_unlabeled, cfg.phantom)
    raise ValueError(f"condition {condition!r} has no pretraining stage")


def pretrain(cfg: ExperimentConfig, condition: str, records: Sequence[ImageRecord],
             log_path=None) -> tuple[Checkpoint, list[float]]:
    pool = pretraining_pool(cfg, condition, records)
    ckpt, curve = pretrain_mae(volumes(cfg, pool), cfg.encoder, cfg.mae, log_path=log_path)
    ckpt.meta["condition"] = condition
    return ckpt, curve


def finetune(cfg: ExperimentConfig, condition: str, train: Sequence[ImageRecord],
             mae_ckpt: Optional[Checkpoint], log_path=None) -> tuple[Checkpoint, list[dict]]:
    init = None if condition == "no" else mae_ckpt
    if condition != "no" and mae_ckpt is None:
        raise ValueError(f"condition {condition!r} needs an MAE checkpoint")
    ckpt, hist = finetune_classifier(volumes(cfg, train), labels_tensor(train), init, cfg.finetune,
                                     enc_cfg=cfg.encoder, log_path=log_path)
    ckpt.meta["condition"] = condition
    return ckpt, hist


def build_index(records: Sequence[ImageRecord], checkpoint: Checkpoint, cfg: ExperimentConfig,
                x: Optional[torch.Tensor] = None) -> EmbeddingIndex:
    """Encode the (train-split) records with the fine-tuned encoder and freeze the index."""
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    x = volumes(cfg, records) if x is None else x
    feats = encode_batch(x, checkpoint.encoder())
    if not len(records):
        feats = np.zeros((0, checkpoint.encoder_cfg.feature_dim), dtype=np.float32)
    return EmbeddingIndex(ids, feats, [r.label for r in records], [r.finding for r in records])


def query_features(records: Sequence[ImageRecord], checkpoint: Checkpoint, cfg: ExperimentConfig,
                   x: Optional[torch.Tensor] = None) -> np.ndarray:
    x = volumes(cfg, records) if x is None else x
    return encode_batch(x, checkpoint.encoder())


def retrieve(idx: EmbeddingIndex, records: Sequence[ImageRecord], feats: np.ndarray, k: int) -> list[RetrievalResult]:
    return query_batch(idx, feats, k, [r.id for r in records], [r.label for r in records])


def classification_row(pred: Sequence[TerritoryLabel], truth: Sequence[TerritoryLabel]) -> dict[str, float]:
    """Per-class one-vs-rest Acc@1 and multiclass Acc@1."""
    pred, truth = list(pred), list(truth)
    n = len(truth)
    row = {}
    for label, col in zip(LABELS, ("Anterior", "Deep gray", "Posterior", "Normal")):
        row[col] = sum((p is label) == (t is label) for p, t in zip(pred, truth)) / n
    row["Multi class Acc@1"] = sum(p is t for p, t in zip(pred, truth)) / n
    return row


CLASSIFICATION_COLUMNS = ("Pretrain", "Normal", "Anterior", "Deep gray", "Posterior", "Multi class Acc@1")


def oracle_reports(results: Sequence[RetrievalResult], records: Sequence[ImageRecord],
                   m: int) -> list[RadiologyReport]:
    return [generate_report_oracle(render_prompt(rec.registry, res, m), res)
            for res, rec in zip(results, records)]


@dataclass
class ConditionResult:
    condition: str
    retrieval: dict
    classification: dict
    report_acc1: float
    silhouette_train: float
    silhouette_test: float
    mae_curve: list = field(default_factory=list)
    finetune_history: list = field(default_factory=list)
    index: Optional[EmbeddingIndex] = None
    results: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    predictions: list = field(default_factory=list)


def evaluate_condition(cfg: ExperimentConfig, condition: str, ckpt: Checkpoint,
                       train: Sequence[ImageRecord], test: Sequence[ImageRecord],
                       x_train: Optional[torch.Tensor] = None,
                       x_test: Optional[torch.Tensor] = None,
                       idx: Optional[EmbeddingIndex] = None) -> ConditionResult:
    x_train = volumes(cfg, train) if x_train is None else x_train
    x_test = volumes(cfg, test) if x_test is None else x_test
    idx = build_index(train, ckpt, cfg, x_train) if idx is None else idx
    q = query_features(test, ckpt, cfg, x_test)
    k_max = max(max(cfg.ks), cfg.m)
    results = retrieve(idx, test, q, k_max)
    row = retrieval_table(results, cfg.ks)

    logits = predict_logits(ckpt.build(), x_test)
    preds = [label_from_logits(z) for z in logits]
    cls_row = classification_row(preds, [r.label for r in test])

    reports = oracle_reports(results, test, cfg.m)
    rep_acc = report_territory_acc1(reports, [r.label for r in test])
    return ConditionResult(
        condition, row, cls_row, rep_acc,
        silhouette_score(idx.features, idx.labels),
        silhouette_score(q, [r.label for r in test]),
        index=idx, results=results, reports=reports, predictions=preds)


def run_experiment(cfg: ExperimentConfig, conditions: Optional[Sequence[str]] = None,
                   records: Optional[Sequence[ImageRecord]] = None) -> dict:
    """In-memory run of every stage for the requested conditions, with timings."""
    conditions = tuple(conditions or cfg.conditions)
    t0 = time.perf_counter()
    records = make_dataset(cfg) if records is None else records
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    x_train, x_test = volumes(cfg, train), volumes(cfg, test)
    timings = {"data": time.perf_counter() - t0}
    out: dict = {"conditions": {}, "timings": timings}
    for cond in conditions:
        t = time.perf_counter()
        curve: list = []
        mae_ckpt = None
        if cond != "no":
            mae_ckpt, curve = pretrain(cfg, cond, train)
        t_mae = time.perf_counter() - t
        clf, hist = finetune_classifier(x_train, labels_tensor(train), mae_ckpt, cfg.finetune,
                                        enc_cfg=cfg.encoder)
        res = evaluate_condition(cfg, cond, clf, train, test, x_train, x_test)
        res.mae_curve, res.finetune_history = curve, hist
        out["conditions"][cond] = res
        timings[cond] = {"pretrain": t_mae, "total": time.perf_counter() - t}
    timings["total"] = time.perf_counter() - t0
    return out


def write_evaluation(results: Mapping[str, ConditionResult], out_dir: str | Path,
                     ks: Sequence[int] = (1, 5, 10), extra: Optional[dict] = None) -> dict[str, Path]:
    """Write the retrieval, classification and report CSVs plus ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = {"no": "No", "small": "Small data", "large": "Large data"}
    ret_cols = ("Pretrain",) + tuple(f"mAP@{k}" for k in ks) + tuple(f"Acc@{k}" for k in ks)
    paths = {
        "retrieval": out / "retrieval.csv",
        "classification": out / "classification.csv",
        "report": out / "report_territory.csv",
        "summary": out / "summary.json",
    }
    write_csv(paths["retrieval"], [{"Pretrain": names[c], **r.retrieval} for c, r in results.items()], ret_cols)
    write_csv(paths["classification"], [{"Pretrain": names[c], **r.classification} for c, r in results.items()],
              CLASSIFICATION_COLUMNS)
    write_csv(paths["report"], [{"Pretrain": names[c], "Report territory Acc@1": r.report_acc1,
                                 "Image retrieval Acc@1": r.retrieval["Acc@1"]} for c, r in results.items()],
              ("Pretrain", "Report territory Acc@1", "Image retrieval Acc@1"))
    summary = {
        "conditions": {
            c: {
                "retrieval": r.retrieval,
                "classification": r.classification,
                "report_territory_acc1": r.report_acc1,
                "silhouette_train": r.silhouette_train,
                "silhouette_test": r.silhouette_test,
                "mae_loss_first": r.mae_curve[0] if r.mae_curve else None,
                "mae_loss_last": r.mae_curve[-1] if r.mae_curve else None,
                "index_checksum": r.index.checksum() if r.index is not None else None,
            }
            for c, r in results.items()
        },
        **(extra or {}),
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return paths
