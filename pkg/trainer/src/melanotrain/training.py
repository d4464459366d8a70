"""Training loop with early stopping on validation accuracy.

Cross-entropy, Adam, defaults lr 3e-4 / batch 256 / patience 8. With a
frozen backbone the conv features are extracted once (and cached on disk
keyed by the sample list and seed), so head training is cheap even on
CPU; unfrozen runs go through the full network every step. Class
imbalance is handled by sampling weights: underrepresented classes are
re-drawn with fresh geometric augmentation to match the largest class.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

from .data import PatchDataset, Sample, load_batch, load_dataset, split_dataset
from .model import PatchClassifier, load_backbone_weights

logger = logging.getLogger(__name__)


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset_dir: str
    arity: str = "multiclass"
    freeze_backbone: bool = False
    learning_rate: float = 0.0003
    batch_size: int = 256
    patience: int = 8
    max_epochs: int = 50
    val_fraction: float = 0.2
    seed: int = 0
    weights_path: str | None = None
    cache_dir: str | None = None
    augment_minority: bool = True
    out_dir: str = "train_out"


@dataclass
class TrainResult:
    checkpoint_path: Path
    log: list[dict] = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_epoch: int = -1


def _cache_key(samples, seed: int) -> str:
    digest = hashlib.sha256()
    digest.update(str(seed).encode())
    for sample in samples:
        digest.update(str(sample.path).encode())
        digest.update(str(sample.path.stat().st_size).encode())
    return digest.hexdigest()[:24]


def _extract_all_features(
    model: PatchClassifier,
    samples,
    dataset: PatchDataset,
    cache_dir: str | None,
    seed: int,
    batch_size: int = 16,
) -> torch.Tensor:
    cache_path = None
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        cache_path = Path(cache_dir) / f"features_{_cache_key(samples, seed)}.pt"
        if cache_path.exists():
            logger.info("feature cache hit: %s", cache_path)
            return torch.load(cache_path, weights_only=True)
    chunks = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch, _ = load_batch(samples[start : start + batch_size], dataset)
            chunks.append(model.extract_features(batch))
    feats = torch.cat(chunks)
    if cache_path:
        torch.save(feats, cache_path)
    return feats


def _epoch_sample_plan(
    train_samples: tuple[Sample, ...],
    epoch: int,
    seed: int,
    augment_minority: bool,
) -> list[tuple[int, int | None]]:
    """Indices (+ optional augmentation seed) for one epoch.

    Every original sample appears once; underrepresented classes are
    topped up to the majority count with augmented re-draws of their own
    members, so each epoch is class-balanced.
    """
    rng = random.Random((seed * 1_000_003) ^ epoch)
    by_class: dict[str, list[int]] = {}
    for i, sample in enumerate(train_samples):
        by_class.setdefault(sample.label, []).append(i)
    plan: list[tuple[int, int | None]] = [(i, None) for i in range(len(train_samples))]
    if augment_minority and len(by_class) > 1:
        target = max(len(v) for v in by_class.values())
        for name in sorted(by_class):
            members = by_class[name]
            for k in range(target - len(members)):
                idx = members[k % len(members)]
                plan.append((idx, rng.randrange(2**31)))
    rng.shuffle(plan)
    return plan


def _evaluate(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).float().mean())


def train(config: TrainConfig) -> TrainResult:
    """Run the full loop; writes checkpoint, log, and a metrics CSV."""
    torch.manual_seed(config.seed)
    dataset = load_dataset(config.dataset_dir, config.arity)
    train_samples, val_samples = split_dataset(dataset, config.val_fraction, config.seed)
    logger.info(
        "training on %d patches, validating on %d (%s)",
        len(train_samples), len(val_samples), dict(dataset.class_counts()),
    )

    model = PatchClassifier(config.arity, freeze_backbone=config.freeze_backbone)
    load_backbone_weights(model, config.weights_path)
    loss_fn = nn.CrossEntropyLoss()
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate)

    frozen = config.freeze_backbone
    if frozen:
        # One conv pass over the corpus; epochs then touch only the head.
        # Dataset-level augmented copies (if exported) are regular samples
        # here, so runtime augmentation is skipped.
        train_feats = _extract_all_features(
            model, train_samples, dataset, config.cache_dir, config.seed
        )
        val_feats = _extract_all_features(
            model, val_samples, dataset, config.cache_dir, config.seed + 1
        )
        train_labels = torch.tensor([s.class_index for s in train_samples])
        val_labels = torch.tensor([s.class_index for s in val_samples])

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_val = -1.0
    best_epoch = -1
    best_state = None
    log: list[dict] = []

    for epoch in range(config.max_epochs):
        model.train()
        epoch_loss = 0.0
        epoch_correct = 0
        epoch_total = 0
        if frozen:
            order = torch.randperm(len(train_samples))
            for start in range(0, len(order), config.batch_size):
                idx = order[start : start + config.batch_size]
                logits = model.head(train_feats[idx])
                loss = loss_fn(logits, train_labels[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(idx)
                epoch_correct += int((logits.argmax(dim=1) == train_labels[idx]).sum())
                epoch_total += len(idx)
        else:
            plan = _epoch_sample_plan(
                train_samples, epoch, config.seed, config.augment_minority
            )
            for start in range(0, len(plan), config.batch_size):
                chunk = plan[start : start + config.batch_size]
                samples = [train_samples[i] for i, _ in chunk]
                seeds = [s for _, s in chunk]
                batch, labels = load_batch(samples, dataset, augment_seeds=seeds)
                logits = model(batch)
                loss = loss_fn(logits, labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_loss += loss.item() * len(chunk)
                epoch_correct += int((logits.argmax(dim=1) == labels).sum())
                epoch_total += len(chunk)

        model.eval()
        with torch.no_grad():
            if frozen:
                val_logits = model.head(val_feats)
            else:
                val_chunks = []
                for start in range(0, len(val_samples), config.batch_size):
                    batch, _ = load_batch(val_samples[start : start + config.batch_size], dataset)
                    val_chunks.append(model(batch))
                val_logits = torch.cat(val_chunks)
                val_labels = torch.tensor([s.class_index for s in val_samples])
            val_acc = _evaluate(val_logits, val_labels)

        train_loss = epoch_loss / max(epoch_total, 1)
        if not torch.isfinite(torch.tensor(train_loss)):
            raise TrainError(f"non-finite training loss at epoch {epoch}")
        entry = {
            "epoch": epoch,
            "train_loss": train_loss,
            "train_accuracy": epoch_correct / max(epoch_total, 1),
            "val_accuracy": val_acc,
        }
        log.append(entry)
        logger.info(
            "epoch %d: loss %.4f, train acc %.3f, val acc %.3f",
            epoch, entry["train_loss"], entry["train_accuracy"], val_acc,
        )
        if val_acc > best_val:
            best_val = val_acc
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif epoch - best_epoch >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    assert best_state is not None
    model.load_state_dict(best_state)
    checkpoint_path = out_dir / "checkpoint.pt"
    torch.save(
        {
            "state_dict": best_state,
            "arity": config.arity,
            "freeze_backbone": config.freeze_backbone,
            "seed": config.seed,
            "mean": dataset.mean,
            "std": dataset.std,
            "classes": dataset.classes,
            "best_val_accuracy": best_val,
            "best_epoch": best_epoch,
        },
        checkpoint_path,
    )
    (out_dir / "training_log.json").write_text(json.dumps(log, indent=2) + "\n")
    _write_metrics_csv(model, dataset, val_samples, frozen, out_dir, config,
                       val_logits if frozen else None)
    result = TrainResult(
        checkpoint_path=checkpoint_path,
        log=log,
        best_val_accuracy=best_val,
        best_epoch=best_epoch,
    )
    (out_dir / "config.json").write_text(json.dumps(asdict(config), indent=2) + "\n")
    return result


def _write_metrics_csv(model, dataset, val_samples, frozen, out_dir, config, cached_logits):
    """Validation metrics row in the inference pipeline's CSV format."""
    model.eval()
    with torch.no_grad():
        if cached_logits is not None:
            logits = cached_logits
        else:
            chunks = []
            for start in range(0, len(val_samples), config.batch_size):
                batch, _ = load_batch(val_samples[start : start + config.batch_size], dataset)
                chunks.append(model(batch))
            logits = torch.cat(chunks)
    preds = logits.argmax(dim=1).tolist()
    truths = [s.class_index for s in val_samples]
    total = len(truths)
    accuracy = sum(p == t for p, t in zip(preds, truths)) / total
    # malignant (class index 1) is the positive class
    tp = sum(1 for p, t in zip(preds, truths) if p == 1 and t == 1)
    fn = sum(1 for p, t in zip(preds, truths) if p != 1 and t == 1)
    fp = sum(1 for p, t in zip(preds, truths) if p == 1 and t != 1)
    tn = total - tp - fn - fp
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    prec = tp / (tp + fp) if tp + fp else None
    f1 = (
        2 * prec * sens / (prec + sens)
        if prec is not None and sens is not None and prec + sens > 0
        else None
    )

    def fmt(v):
        return "" if v is None else f"{v:.4f}"

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "acc_percent", "f1", "sensitivity", "specificity"])
        writer.writerow(
            [f"vgg16-{config.arity}", f"{accuracy * 100:.2f}", fmt(f1), fmt(sens), fmt(spec)]
        )
