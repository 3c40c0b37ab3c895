"""Two-stage encoder training: MAE pretraining, then territory fine-tuning."""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import LABELS, ImageRecord, TerritoryLabel, Volume, preprocess
from .encoder import (
    Checkpoint,
    DecoderConfig,
    EncoderConfig,
    MaskedAutoencoder,
    MaskPlan,
    NumericalError,
    TerritoryClassifier,
    num_visible,
    sample_mask,
)


class TrainingDiverged(NumericalError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "mae"  # "mae" | "finetune"
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    q: float = 0.25
    seed: int = 0
    warmup_frac: float = 0.05
    norm_pix_loss: bool = False
    train_encoder: bool = True  # finetune only; False trains the linear head alone

    def __post_init__(self):
        if self.stage not in ("mae", "finetune"):
            raise ValueError(f"unknown training stage {self.stage!r}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_MAE = TrainConfig(stage="mae", lr=6.4e-3, weight_decay=0.05, epochs=500, q=0.25)
PAPER_FINETUNE = TrainConfig(stage="finetune", lr=1e-3, weight_decay=0.05, epochs=1000)
DESK_MAE = TrainConfig(stage="mae", lr=1e-3, weight_decay=0.05, epochs=20, q=0.25)
DESK_FINETUNE = TrainConfig(stage="finetune", lr=3e-4, weight_decay=0.05, epochs=30)

PRESETS = {"paper-mae": PAPER_MAE, "paper-finetune": PAPER_FINETUNE,
           "desk-mae": DESK_MAE, "desk-finetune": DESK_FINETUNE}


# ---------------------------------------------------------------------------
# losses


def mae_loss(pred: torch.Tensor, target: torch.Tensor, plan, norm_pix: bool = False) -> torch.Tensor:
    """Mean squared error over masked tokens only.

    ``plan`` is a :class:`MaskPlan` (same plan for every sample) or a boolean
    tensor of shape ``(B, P)`` / ``(P,)`` that is True at masked positions.
    ``pred`` and ``target`` are ``(B, P, D)`` or ``(P, D)``.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if isinstance(plan, MaskPlan):
        mask = torch.from_numpy(plan.mask())
    else:
        mask = torch.as_tensor(plan, dtype=torch.bool)
    if norm_pix:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1e-6).sqrt()
    per_token = ((pred - target) ** 2).mean(dim=-1)
    mask = mask.expand_as(per_token)
    if not mask.any():
        raise ValueError("mask plan has no masked tokens")
    return per_token[mask].mean()


def cross_entropy(logits: Sequence[float], label: TerritoryLabel | int) -> float:
    """-log softmax(logits)[label] with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    idx = label if isinstance(label, (int, np.integer)) else TerritoryLabel(label).index
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[idx])


# ---------------------------------------------------------------------------
# data


def stack_volumes(records_or_volumes, dims: Sequence[int], spacing: Sequence[float],
                  normalize: bool = True) -> torch.Tensor:
    """Preprocess and stack volumes onto the encoder grid, (N, C, X, Y, Z) float32."""
    vols = [r.volume if isinstance(r, ImageRecord) else r for r in records_or_volumes]
    if not vols:
        return torch.zeros((0, 2, *dims))
    arrays = [np.asarray(preprocess(v, dims, spacing).data if normalize else v.data) for v in vols]
    return torch.from_numpy(np.stack(arrays))


def labels_tensor(records: Sequence[ImageRecord]) -> torch.Tensor:
    return torch.tensor([r.label.index for r in records], dtype=torch.long)


class _Logger:
    def __init__(self, path: Optional[str | Path], stage: str):
        self.path = Path(path) if path else None
        self.stage = stage
        self.t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, **row):
        if self.path is None:
            return
        row = {"stage": self.stage, **row, "wall_time": round(time.perf_counter() - self.t0, 3)}
        with self.path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")


def _optimizer(params, cfg: TrainConfig, steps_total: int):
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    warmup = max(1, math.ceil(cfg.warmup_frac * steps_total))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: min(1.0, (step + 1) / warmup))
    return opt, sched


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.from_numpy(order[i:i + batch_size])


# ---------------------------------------------------------------------------
# stage 1


def pretrain_mae(volumes: torch.Tensor, enc_cfg: EncoderConfig, cfg: TrainConfig = DESK_MAE,
                 dec_cfg: Optional[DecoderConfig] = None, log_path=None,
                 progress: Optional[Callable[[int, float], None]] = None) -> tuple[Checkpoint, list[float]]:
    """Masked-autoencoder pretraining on preprocessed volumes ``(N, C, X, Y, Z)``.

    Every sample gets a fresh mask plan each epoch. Returns the encoder+decoder
    checkpoint and the per-epoch mean loss.
    """
    if cfg.stage != "mae":
        raise ValueError("pretrain_mae needs a TrainConfig with stage='mae'")
    torch.manual_seed(cfg.seed)
    model = MaskedAutoencoder(enc_cfg, dec_cfg)
    rng = np.random.default_rng(cfg.seed)
    P = enc_cfg.num_patches
    num_visible(P, cfg.q)
    n = len(volumes)
    steps_total = cfg.epochs * math.ceil(n / cfg.batch_size) if n else 0
    opt, sched = _optimizer(model.parameters(), cfg, steps_total)
    log = _Logger(log_path, "mae")
    curve = []
    model.train()
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            plans = [sample_mask(P, cfg.q, rng) for _ in range(len(idx))]
            visible = torch.tensor([p.visible_indices for p in plans], dtype=torch.long)
            masked = torch.from_numpy(np.stack([p.mask() for p in plans]))
            pred, target = model(volumes[idx], visible)
            loss = mae_loss(pred, target, masked, cfg.norm_pix_loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"MAE loss became {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_loss = total / max(count, 1)
        curve.append(epoch_loss)
        log(epoch=epoch, loss=epoch_loss)
        if progress:
            progress(epoch, epoch_loss)
    ckpt = Checkpoint.from_model(model, {"stage": "mae", "train": cfg.to_dict(), "loss_curve": curve,
                                         "n_volumes": n})
    return ckpt, curve


# ---------------------------------------------------------------------------
# stage 2


def accuracy(model: TerritoryClassifier, volumes: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 64) -> float:
    if len(labels) == 0:
        return 0.0
    was = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(volumes), batch_size):
            logits = model(volumes[i:i + batch_size])
            correct += int((logits.argmax(dim=1) == labels[i:i + batch_size]).sum())
    model.train(was)
    return correct / len(labels)


def finetune_classifier(volumes: torch.Tensor, labels: torch.Tensor, checkpoint: Optional[Checkpoint],
                        cfg: TrainConfig = DESK_FINETUNE, enc_cfg: Optional[EncoderConfig] = None,
                        log_path=None,
                        progress: Optional[Callable[[int, float, float], None]] = None
                        ) -> tuple[Checkpoint, list[dict]]:
    """Train encoder + linear head (feature_dim -> 4) with cross-entropy.

    ``checkpoint=None`` starts from a fresh encoder (the no-pretrain ablation),
    in which case ``enc_cfg`` is required. Returns the classifier checkpoint and
    per-epoch ``{"loss", "acc"}`` where acc is train-set Acc@1 after the epoch.
    """
    if cfg.stage != "finetune":
        raise ValueError("finetune_classifier needs a TrainConfig with stage='finetune'")
    if checkpoint is None and enc_cfg is None:
        raise ValueError("enc_cfg is required when no checkpoint is given")
    enc_cfg = checkpoint.encoder_cfg if checkpoint is not None else enc_cfg
    torch.manual_seed(cfg.seed)
    model = TerritoryClassifier(enc_cfg)
    if checkpoint is not None:
        model.encoder.load_state_dict(checkpoint.encoder_state())
    params = model.parameters() if cfg.train_encoder else model.head.parameters()
    if not cfg.train_encoder:
        model.encoder.requires_grad_(False)
    rng = np.random.default_rng(cfg.seed)
    n = len(volumes)
    steps_total = cfg.epochs * math.ceil(n / cfg.batch_size) if n else 0
    opt, sched = _optimizer(params, cfg, steps_total)
    log = _Logger(log_path, "finetune")
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        total = 0.0
        for step, idx in enumerate(_batches(n, cfg.batch_size, rng)):
            loss = F.cross_entropy(model(volumes[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"cross-entropy became {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        acc = accuracy(model, volumes, labels)
        row = {"epoch": epoch, "loss": total / max(n, 1), "acc": acc}
        history.append(row)
        log(**row)
        if progress:
            progress(epoch, row["loss"], acc)
    meta = {"stage": "finetune", "train": cfg.to_dict(), "history": history,
            "pretrained": checkpoint is not None}
    return Checkpoint.from_model(model, meta), history


def predict_logits(model: TerritoryClassifier, volumes: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(volumes), batch_size):
            out.append(model(volumes[i:i + batch_size]))
    return torch.cat(out).numpy() if out else np.zeros((0, len(LABELS)), dtype=np.float32)


def label_from_logits(logits: Sequence[float]) -> TerritoryLabel:
    """Argmax over the four logits; ties go to the lowest class index."""
    return LABELS[int(np.argmax(np.asarray(logits)))]


def predict_class(v: Volume | torch.Tensor, model: TerritoryClassifier | Checkpoint) -> tuple[TerritoryLabel, np.ndarray]:
    """Predict the territory of one preprocessed volume."""
    if isinstance(model, Checkpoint):
        model = model.build()
    x = torch.from_numpy(np.array(v.data))[None] if isinstance(v, Volume) else v[None]
    logits = predict_logits(model, x)[0]
    return label_from_logits(logits), logits
