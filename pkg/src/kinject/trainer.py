"""Two-stage optimization.

Stage 1 (knowledge optimization) aligns backbone hidden features, projected
through per-scale injection heads, with the per-category knowledge vectors: the
loss is the negative cosine against the correct category's vector plus an
optional weighted mean cosine against sampled wrong-category vectors. The
classification head is untouched. Stage 2 (classification optimization)
freezes the backbone and injection heads and trains only the classification
head with cross-entropy; baseline mode instead trains backbone plus head end
to end with no knowledge anywhere, for the fair no-injection comparison.

Both stages draw their per-epoch data order from the same seeded stream, so a
baseline run and an injected run with equal seeds consume identical batches.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import engine
from .engine import Adam, Tensor, backward
from .errors import (
    DimensionMismatch,
    MissingCategory,
    NoScaleEnabled,
    ZeroVector,
)
from .kiemb import ALL_SCALES
from .net import GROUP_BACKBONE, GROUP_MLP, ModelState, forward_hidden, \
    forward_injection, forward_mlp, inject_group
from .seeding import derive_rng, stable_hash64
from .textembed import load_external_features


@dataclass
class KnowledgeBundle:
    """Per-category unit knowledge vectors for each available scale."""

    categories: tuple[str, ...]
    scales: dict[str, np.ndarray]  # scale tag -> (n_categories, dim)

    def __post_init__(self) -> None:
        k = len(self.categories)
        for tag, mat in self.scales.items():
            mat = np.asarray(mat, dtype=np.float32)
            if mat.ndim != 2 or mat.shape[0] != k:
                raise DimensionMismatch(
                    f"scale {tag}: matrix {mat.shape}, expected ({k}, dim)"
                )
            norms = np.linalg.norm(mat.astype(np.float64), axis=1)
            if not np.all(np.isfinite(mat)) or np.any(norms == 0.0):
                raise ZeroVector(f"scale {tag}: zero or non-finite category vector")
            self.scales[tag] = (mat / norms[:, None]).astype(np.float32)

    def dim(self, scale: str) -> int:
        return self.scales[scale].shape[1]

    @property
    def scale_dims(self) -> dict[str, int]:
        return {tag: mat.shape[1] for tag, mat in self.scales.items()}

    def aligned_to(self, categories: Sequence[str]) -> "KnowledgeBundle":
        """Reorder category rows to match a dataset's category order."""
        index = {c: i for i, c in enumerate(self.categories)}
        missing = [c for c in categories if c not in index]
        if missing:
            raise MissingCategory(f"bundle lacks categories: {missing}")
        rows = [index[c] for c in categories]
        return KnowledgeBundle(
            categories=tuple(categories),
            scales={tag: mat[rows] for tag, mat in self.scales.items()},
        )

    @classmethod
    def from_kiemb_files(
        cls, paths: dict[str, str | Path], categories: Sequence[str]
    ) -> "KnowledgeBundle":
        scales = {}
        for tag, path in paths.items():
            feats = load_external_features(path, categories)
            scales[tag] = np.stack([f.vector for f in feats]).astype(np.float32)
        return cls(categories=tuple(categories), scales=scales)


@dataclass(frozen=True)
class TrainPlan:
    knowledge_epochs: int = 30
    classification_epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    scales: tuple[str, ...] = ALL_SCALES
    negatives: int = 4
    negative_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.knowledge_epochs < 0 or self.classification_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.negatives < 0 or self.negative_weight < 0:
            raise ValueError(f"invalid plan: {self}")


@dataclass
class StageReport:
    stage: str
    epochs: int
    losses: list[float] = field(default_factory=list)
    alignment: dict[str, list[float]] = field(default_factory=dict)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    final_val_accuracy: float | None = None
    order_digests: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "losses": self.losses,
            "alignment": self.alignment,
            "train_accuracy": self.train_accuracy,
            "val_accuracy": self.val_accuracy,
            "final_val_accuracy": self.final_val_accuracy,
            "order_digests": self.order_digests,
        }


# -- losses --------------------------------------------------------------


def _row_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return engine.reshape(x, (1, -1)) if x.data.ndim == 1 else x
    arr = np.asarray(x)
    return Tensor(arr.reshape(1, -1))


def cosine_loss(nu, xi) -> Tensor:
    """Negative cosine similarity of two vectors, as a scalar graph node."""
    a, b = _row_tensor(nu), _row_tensor(xi)
    if a.shape != b.shape:
        raise DimensionMismatch(f"cosine_loss: {a.shape} vs {b.shape}")
    if not np.linalg.norm(a.data) or not np.linalg.norm(b.data):
        raise ZeroVector("cosine_loss is undefined for zero vectors")
    an = engine.l2_normalize_rows(a)
    bn = engine.l2_normalize_rows(b)
    return engine.scale(engine.tsum(engine.mul(an, bn)), -1.0)


def _sample_negatives(
    rng: np.random.Generator, labels: np.ndarray, n_categories: int, m: int
) -> np.ndarray:
    """(batch, n_categories) 0/1 mask with m wrong categories picked per row."""
    mask = np.zeros((labels.shape[0], n_categories), dtype=np.float32)
    for i, label in enumerate(labels):
        wrong = [c for c in range(n_categories) if c != label]
        picks = rng.choice(wrong, size=m, replace=m > len(wrong))
        for c in picks:
            mask[i, c] += 1.0
    return mask


def _batch_knowledge_loss(
    model: ModelState,
    nu: Tensor,
    labels: np.ndarray,
    bundle: KnowledgeBundle,
    mask: Sequence[str],
    m: int,
    lam: float,
    rng: np.random.Generator | None,
    train: bool = False,
    dropout_seed: int = 0,
) -> tuple[Tensor, dict[str, float]]:
    if not mask:
        raise NoScaleEnabled("knowledge loss needs at least one enabled scale")
    b = labels.shape[0]
    k = len(bundle.categories)
    pos_mask = np.zeros((b, k), dtype=np.float32)
    pos_mask[np.arange(b), labels] = 1.0
    total: Tensor | None = None
    positives: dict[str, float] = {}
    for tag in mask:
        if tag not in bundle.scales:
            raise MissingCategory(f"bundle has no vectors for scale {tag!r}")
        proj = forward_injection(model, nu, tag, train=train, dropout_seed=dropout_seed)
        targets = Tensor(bundle.scales[tag].T)  # rows are unit vectors
        cos = engine.matmul(proj, targets)  # (batch, n_categories) cosines
        term = engine.scale(
            engine.tsum(engine.mul(cos, Tensor(pos_mask))), -1.0 / b
        )
        positives[tag] = float((cos.data * pos_mask).sum() / b)
        if m > 0 and lam > 0.0:
            if rng is None:
                raise ValueError("negative sampling needs an rng")
            neg_mask = _sample_negatives(rng, labels, k, m)
            neg = engine.scale(
                engine.tsum(engine.mul(cos, Tensor(neg_mask))), lam / (b * m)
            )
            term = engine.add(term, neg)
        total = term if total is None else engine.add(total, term)
    return total, positives


def knowledge_loss(
    model: ModelState,
    nu,
    label: int,
    bundle: KnowledgeBundle,
    mask: Sequence[str],
    m: int = 0,
    lam: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Single-sample knowledge loss; see _batch_knowledge_loss for the math."""
    nu_t = _row_tensor(nu)
    labels = np.array([label])
    loss, _ = _batch_knowledge_loss(
        model, nu_t, labels, bundle, mask, m=m, lam=lam, rng=rng
    )
    return loss


# -- stages ----------------------------------------------------------------


def _epoch_order(rng: np.random.Generator, n: int) -> tuple[np.ndarray, str]:
    perm = rng.permutation(n)
    return perm, format(stable_hash64("order", perm.tobytes()), "016x")


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def _eval_hidden(model: ModelState, images: np.ndarray, batch_size: int) -> np.ndarray:
    rows = []
    for i in range(0, images.shape[0], batch_size):
        rows.append(forward_hidden(model, images[i : i + batch_size]).data)
    return np.concatenate(rows, axis=0)


def evaluate_accuracy(
    model: ModelState, images: np.ndarray, labels: np.ndarray, batch_size: int = 64
) -> float:
    nu = _eval_hidden(model, images, batch_size)
    logits = forward_mlp(model, Tensor(nu)).data
    return _accuracy(logits, labels)


def run_knowledge_stage(
    model: ModelState,
    dataset,
    bundle: KnowledgeBundle,
    plan: TrainPlan,
) -> StageReport:
    """Stage 1: optimize backbone + enabled injection heads against the
    knowledge vectors; the classification head is untouched."""
    bundle = bundle.aligned_to(dataset.categories)
    for tag in plan.scales:
        if tag not in model.heads:
            raise MissingCategory(f"model has no injection head for {tag!r}")
        if model.heads[tag].out_dim != bundle.dim(tag):
            raise DimensionMismatch(
                f"head {tag}: dim {model.heads[tag].out_dim} vs bundle {bundle.dim(tag)}"
            )
    report = StageReport(stage="knowledge", epochs=plan.knowledge_epochs)
    if plan.knowledge_epochs == 0:
        return report

    params = dict(model.group_params(GROUP_BACKBONE))
    for tag in plan.scales:
        params.update(model.group_params(inject_group(tag)))
    opt = Adam(params, lr=plan.learning_rate)
    order_rng = derive_rng(plan.seed, "order", "knowledge")
    neg_rng = derive_rng(plan.seed, "negatives")
    images, labels = dataset.train_images, dataset.train_labels
    n = images.shape[0]
    for epoch in range(plan.knowledge_epochs):
        perm, digest = _epoch_order(order_rng, n)
        report.order_digests.append(digest)
        epoch_loss = 0.0
        epoch_pos = {tag: 0.0 for tag in plan.scales}
        batches = 0
        for start in range(0, n, plan.batch_size):
            idx = perm[start : start + plan.batch_size]
            opt.zero_grad()
            nu = forward_hidden(model, images[idx], train=True)
            loss, positives = _batch_knowledge_loss(
                model,
                nu,
                labels[idx],
                bundle,
                plan.scales,
                m=plan.negatives,
                lam=plan.negative_weight,
                rng=neg_rng,
                train=True,
                dropout_seed=stable_hash64(plan.seed, "dropout", epoch, start),
            )
            backward(loss)
            opt.step()
            epoch_loss += loss.item()
            for tag, value in positives.items():
                epoch_pos[tag] += value
            batches += 1
        report.losses.append(epoch_loss / batches)
        for tag in plan.scales:
            report.alignment.setdefault(tag, []).append(epoch_pos[tag] / batches)
    return report


def run_classification_stage(
    model: ModelState,
    dataset,
    plan: TrainPlan,
    baseline: bool = False,
) -> StageReport:
    """Stage 2: cross-entropy training of the classification head.

    Injected mode freezes backbone and injection heads (their bytes are
    invariant under this stage) and trains the head on hidden features, which
    are therefore precomputed once. Baseline mode unfreezes everything and
    trains backbone + head end to end with no knowledge stage at all.
    """
    report = StageReport(stage="classification", epochs=plan.classification_epochs)
    order_rng = derive_rng(plan.seed, "order", "classification")
    images, labels = dataset.train_images, dataset.train_labels
    val_images, val_labels = dataset.val_images, dataset.val_labels
    n = images.shape[0]

    if baseline:
        model.unfreeze(GROUP_BACKBONE)
        for tag in model.heads:
            model.unfreeze(inject_group(tag))
        model.unfreeze(GROUP_MLP)
        opt = Adam(
            dict(model.group_params(GROUP_BACKBONE)) | model.group_params(GROUP_MLP),
            lr=plan.learning_rate,
        )
        for epoch in range(plan.classification_epochs):
            perm, digest = _epoch_order(order_rng, n)
            report.order_digests.append(digest)
            correct = 0
            epoch_loss = 0.0
            for start in range(0, n, plan.batch_size):
                idx = perm[start : start + plan.batch_size]
                opt.zero_grad()
                nu = forward_hidden(model, images[idx], train=True)
                logits = forward_mlp(model, nu)
                loss = engine.softmax_cross_entropy(logits, labels[idx])
                backward(loss)
                opt.step()
                epoch_loss += loss.item() * len(idx)
                correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            report.losses.append(epoch_loss / n)
            report.train_accuracy.append(correct / n)
            report.val_accuracy.append(
                evaluate_accuracy(model, val_images, val_labels, plan.batch_size)
            )
        report.final_val_accuracy = (
            report.val_accuracy[-1]
            if report.val_accuracy
            else evaluate_accuracy(model, val_images, val_labels, plan.batch_size)
        )
        return report

    model.freeze(GROUP_BACKBONE)
    for tag in model.heads:
        model.freeze(inject_group(tag))
    model.unfreeze(GROUP_MLP)
    opt = Adam(model.group_params(GROUP_MLP), lr=plan.learning_rate)
    # frozen deterministic backbone: hidden features are fixed, compute once
    nu_train = _eval_hidden(model, images, plan.batch_size)
    nu_val = _eval_hidden(model, val_images, plan.batch_size)
    for epoch in range(plan.classification_epochs):
        perm, digest = _epoch_order(order_rng, n)
        report.order_digests.append(digest)
        correct = 0
        epoch_loss = 0.0
        for start in range(0, n, plan.batch_size):
            idx = perm[start : start + plan.batch_size]
            opt.zero_grad()
            logits = forward_mlp(model, Tensor(nu_train[idx]))
            loss = engine.softmax_cross_entropy(logits, labels[idx])
            backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        report.losses.append(epoch_loss / n)
        report.train_accuracy.append(correct / n)
        val_logits = forward_mlp(model, Tensor(nu_val)).data
        report.val_accuracy.append(_accuracy(val_logits, val_labels))
    report.final_val_accuracy = (
        report.val_accuracy[-1]
        if report.val_accuracy
        else _accuracy(forward_mlp(model, Tensor(nu_val)).data, val_labels)
    )
    return report


# -- ablation ----------------------------------------------------------------


STANDARD_MASKS: tuple[tuple[str, ...], ...] = (
    (),
    ("KI-S",),
    ("KI-M",),
    ("KI-L",),
    ALL_SCALES,
)


@dataclass
class AblationRow:
    mask: tuple[str, ...]
    val_accuracy: float
    reports: list[StageReport]

    def to_dict(self) -> dict:
        return {
            "mask": list(self.mask),
            "val_accuracy": self.val_accuracy,
            "reports": [r.to_dict() for r in self.reports],
        }


def ablation_run(
    dataset,
    bundle: KnowledgeBundle,
    masks: Iterable[tuple[str, ...]],
    plan: TrainPlan,
    backbone_cfg,
) -> list[AblationRow]:
    """Full two-stage pipeline per scale mask under identical seeds."""
    bundle = bundle.aligned_to(dataset.categories)
    rows = []
    for mask in masks:
        model = ModelState(
            backbone_cfg,
            bundle.scale_dims,
            n_categories=len(dataset.categories),
            seed=plan.seed,
        )
        reports = []
        if mask:
            stage_plan = replace(plan, scales=tuple(mask))
            reports.append(run_knowledge_stage(model, dataset, bundle, stage_plan))
            reports.append(run_classification_stage(model, dataset, stage_plan))
        else:
            reports.append(
                run_classification_stage(model, dataset, plan, baseline=True)
            )
        rows.append(
            AblationRow(
                mask=tuple(mask),
                val_accuracy=reports[-1].final_val_accuracy,
                reports=reports,
            )
        )
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path: str | Path, backbone: str = "tiny") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["backbone", "KI-S", "KI-M", "KI-L", "val_accuracy"])
        for row in rows:
            writer.writerow(
                [backbone]
                + ["yes" if tag in row.mask else "no" for tag in ALL_SCALES]
                + [f"{row.val_accuracy:.4f}"]
            )
