"""Optimisation of the trainable subset, evaluation, and checkpoint I/O.

Checkpoints are a pair of files sharing a stem: ``<stem>.safetensors`` holds
the trainable tensors, BatchNorm buffers and flattened AdamW state;
``<stem>.json`` holds the model config, its fingerprint, schedule step and
metrics. Backbone weights are never stored; they are rebuilt from
``backbone.weights_source`` (or the seeded random init).
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from .analysis import benchmark_latency
from .config import FcbNetConfig, TrainConfig
from .data import DatasetManifest, SegmentationDataset
from .metrics import ConfusionMatrix, iou_scores
from .model import FcbNet, build_fcbnet

log = logging.getLogger(__name__)

OPTIM_PREFIX = "optim."
DEVICE_ENV = "FCBNET_DEVICE"


def default_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def _device_of(model: FcbNet) -> torch.device:
    return next(model.parameters()).device


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def onecycle_lr(step: int, total_steps: int, config: TrainConfig) -> float:
    """Cosine one-cycle learning rate at ``step`` of ``total_steps``.

    Rises from ``max_lr / div_factor`` to ``max_lr`` at step
    ``ceil(pct_start * total_steps)``, then anneals to
    ``max_lr / final_div_factor`` at the final step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = config.max_lr
    start = peak / config.div_factor
    end = peak / config.final_div_factor
    warm = min(math.ceil(config.pct_start * total_steps), total_steps - 1)
    if step < warm:
        return peak + (start - peak) * (1 + math.cos(math.pi * step / warm)) / 2
    span = total_steps - 1 - warm
    if span <= 0:
        return peak
    return end + (peak - end) * (1 + math.cos(math.pi * (step - warm) / span)) / 2


def make_optimizer(model: FcbNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.trainable_parameters(),
        lr=config.max_lr / config.div_factor,
        betas=tuple(config.betas),
        weight_decay=config.weight_decay,
    )


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    steps: int
    val_miou: Optional[float] = None


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    # learning rate applied at each executed optimiser step
    lrs: list[float] = field(default_factory=list)
    best_miou: Optional[float] = None
    best_epoch: Optional[int] = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(asdict(e)) + "\n")


def _augment(x: Tensor, y: Tensor, config: TrainConfig, gen: torch.Generator) -> tuple[Tensor, Tensor]:
    if config.hflip and torch.rand(1, generator=gen).item() < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    if config.vflip and torch.rand(1, generator=gen).item() < 0.5:
        x, y = x.flip(-2), y.flip(-2)
    if config.rot90 and x.shape[-1] == x.shape[-2]:
        k = int(torch.randint(0, 4, (1,), generator=gen))
        x, y = x.rot90(k, (-2, -1)), y.rot90(k, (-2, -1))
    return x, y


def _as_dataset(data: Dataset | DatasetManifest, split: str) -> Dataset:
    if isinstance(data, DatasetManifest):
        return SegmentationDataset(data, split)
    return data


def fit(
    model: FcbNet,
    data: Dataset | DatasetManifest,
    config: TrainConfig | None = None,
    val_data: Dataset | DatasetManifest | None = None,
    out_dir: str | Path | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    extra_meta: dict[str, Any] | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    device: str | torch.device | None = None,
) -> History:
    """Train the correction blocks, decoder and head; the backbone stays fixed.

    ``data`` is a dataset of ``(image, mask)`` pairs or a manifest (its train
    split is used; with a manifest, ``val_data`` defaults to its val split).
    With ``out_dir`` set, the best-validation and last checkpoints are written
    there together with ``history.jsonl``. ``max_steps`` truncates the schedule
    for smoke runs. ``resume`` continues from a checkpoint written by a run with
    the same config: the data order is replayed up to the saved step and the
    schedule picks up at the following step. ``stop_after`` halts once that many
    steps have run without shortening the schedule.
    """
    config = config or TrainConfig()
    config.validate()
    if val_data is None and isinstance(data, DatasetManifest) and data.split("val"):
        val_data = data
    train_ds = _as_dataset(data, "train")
    val_ds = _as_dataset(val_data, "val") if val_data is not None else None
    if len(train_ds) == 0:
        raise TrainingError("training split is empty")

    device = torch.device(device) if device is not None else default_device()
    model.to(device)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(train_ds, batch_size=config.batch_size, shuffle=True, generator=gen, num_workers=0)
    total_steps = config.epochs * len(loader)
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    optimizer = make_optimizer(model, config)
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, model, optimizer)["step"] + 1
    weight = torch.tensor(config.class_weights, dtype=torch.float32, device=device) if config.class_weights else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history = History()
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for x, y in loader:
            if step >= total_steps or (stop_after is not None and step >= stop_after):
                break
            x, y = _augment(x, y, config, gen)
            if step < start:
                step += 1
                continue
            x, y = x.to(device), y.to(device)
            lr = onecycle_lr(step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = model(x)
            loss = F.cross_entropy(logits, y, weight=weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step} (lr={lr:.3g})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            history.lrs.append(lr)
            step += 1
        if not losses:
            if step >= total_steps or (stop_after is not None and step >= stop_after):
                break
            continue
        rec = EpochRecord(epoch, float(np.mean(losses)), optimizer.param_groups[0]["lr"], step)
        if val_ds is not None and len(val_ds) > 0:
            rec.val_miou = evaluate(model, val_ds, latency=False)["miou"]
            if history.best_miou is None or rec.val_miou > history.best_miou:
                history.best_miou, history.best_epoch = rec.val_miou, epoch
                if out is not None:
                    save_checkpoint(out / "best", model, optimizer, step - 1, {"val_miou": rec.val_miou, "epoch": epoch}, extra_meta)
        history.epochs.append(rec)
        log.info("epoch %d loss %.4f lr %.3g val_miou %s", epoch, rec.loss, rec.lr, rec.val_miou)
        if on_epoch is not None:
            on_epoch(rec)
    if out is not None:
        save_checkpoint(out / "last", model, optimizer, step - 1, {"epoch": len(history.epochs)}, extra_meta)
        history.write_jsonl(out / "history.jsonl")
    return history


def predict_labels(model: FcbNet, images: Tensor) -> Tensor:
    """Arg-max class map; ties resolve to the lowest class index."""
    model.eval()
    with torch.no_grad():
        return model(images.to(_device_of(model))).argmax(dim=1).cpu()


def evaluate(
    model: FcbNet,
    data: Dataset | DatasetManifest,
    split: str = "test",
    batch_size: int = 8,
    latency: bool = True,
) -> dict[str, Any]:
    ds = _as_dataset(data, split)
    if len(ds) == 0:
        raise TrainingError(f"split {split!r} is empty")
    cm = ConfusionMatrix(model.config.num_classes)
    shape = None
    for x, y in DataLoader(ds, batch_size=batch_size, shuffle=False, num_workers=0):
        shape = tuple(x.shape[1:])
        cm.accumulate(predict_labels(model, x).numpy(), y.numpy())
    scores = iou_scores(cm)
    names = ["background", "weed"] if model.config.num_classes == 2 else None
    report = scores.to_dict(names)
    report["confusion_matrix"] = cm.counts.tolist()
    report["pixels"] = cm.total
    if latency:
        report["latency"] = benchmark_latency(model, shape, warmup=1, iters=3).to_dict()
    return report


# --- checkpoints -------------------------------------------------------------

def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".safetensors", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".safetensors"), path.with_name(path.name + ".json")


def _trainable_state(model: FcbNet) -> dict[str, Tensor]:
    return {k: v.detach().cpu().clone().contiguous() for k, v in model.state_dict().items() if not k.startswith("backbone.")}


def save_checkpoint(
    path: str | Path,
    model: FcbNet,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = -1,
    metrics: dict[str, Any] | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write a checkpoint; ``step`` is the index of the last completed optimiser step."""
    tensors_path, meta_path = _checkpoint_paths(path)
    tensors_path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _trainable_state(model)
    meta: dict[str, Any] = {
        "fingerprint": model.config.fingerprint(),
        "model_config": model.config.to_dict(),
        "step": step,
        "metrics": metrics or {},
    }
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        osd = optimizer.state_dict()
        groups = []
        for group, live in zip(osd["param_groups"], optimizer.param_groups):
            g = {k: v for k, v in group.items() if k != "params"}
            g["params"] = [names[id(p)] for p in live["params"]]
            groups.append(g)
        for group, live in zip(osd["param_groups"], optimizer.param_groups):
            for idx, p in zip(group["params"], live["params"]):
                for key, val in osd["state"].get(idx, {}).items():
                    tensors[f"{OPTIM_PREFIX}{names[id(p)]}.{key}"] = torch.as_tensor(val).detach().cpu().clone().contiguous()
        meta["optimizer"] = {"param_groups": groups}
    if extra:
        meta.update(extra)
    save_file(tensors, str(tensors_path))
    meta_path.write_text(json.dumps(meta, indent=2))
    return tensors_path


def read_checkpoint_meta(path: str | Path) -> dict[str, Any]:
    tensors_path, meta_path = _checkpoint_paths(path)
    if not tensors_path.is_file() or not meta_path.is_file():
        raise CheckpointError(f"checkpoint not found: expected {tensors_path} and {meta_path}")
    try:
        return json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata {meta_path}: {e}") from e


def load_checkpoint(
    path: str | Path,
    model: FcbNet,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict[str, Any]:
    """Restore trainable state (and optionally AdamW state) in place; returns the metadata."""
    tensors_path, _ = _checkpoint_paths(path)
    meta = read_checkpoint_meta(path)
    if meta.get("fingerprint") != model.config.fingerprint():
        raise CheckpointError(
            f"checkpoint fingerprint {meta.get('fingerprint')} does not match model config {model.config.fingerprint()}"
        )
    try:
        tensors = load_file(str(tensors_path))
    except Exception as e:  # safetensors raises several error types for damaged files
        raise CheckpointError(f"corrupt checkpoint tensors {tensors_path}: {e}") from e
    state = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    expected = set(_trainable_state(model))
    if set(state) != expected:
        raise CheckpointError(f"checkpoint tensors do not match the model ({len(set(state) ^ expected)} differing keys)")
    model.load_state_dict(state, strict=False)
    if optimizer is not None and "optimizer" in meta:
        params = dict(model.named_parameters())
        index = {}
        groups = []
        for g in meta["optimizer"]["param_groups"]:
            g = dict(g)
            ids = []
            for name in g["params"]:
                index[name] = len(index)
                ids.append(index[name])
            g["params"] = ids
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        opt_state: dict[int, dict[str, Tensor]] = {}
        for key, val in tensors.items():
            if not key.startswith(OPTIM_PREFIX):
                continue
            name, field_name = key[len(OPTIM_PREFIX):].rsplit(".", 1)
            if name not in params:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            opt_state.setdefault(index[name], {})[field_name] = val
        optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    return meta


def load_model(path: str | Path) -> tuple[FcbNet, dict[str, Any]]:
    """Rebuild a model from a checkpoint's stored config and load its state."""
    meta = read_checkpoint_meta(path)
    model = build_fcbnet(FcbNetConfig.from_dict(meta["model_config"]))
    load_checkpoint(path, model)
    model.eval()
    return model, meta


def checkpoint_roundtrip(model: FcbNet, path: str | Path) -> FcbNet:
    save_checkpoint(path, model)
    restored, _ = load_model(path)
    return restored
