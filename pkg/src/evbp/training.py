"""Joint training of the multi-task network on ``L_P + lambda * sum_h L_A[h]``."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import PRIMARY, TRUNK, MtlNetwork, WeightSnapshot, snapshot


class NumericError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: np.ndarray | int  # class index, or per-cell class indices
    a: tuple[np.ndarray, ...] = ()  # one binary target vector per auxiliary head


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    # leading epochs trained on the primary loss only (trunk + primary head)
    pretrain_epochs: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs/pretrain_epochs must be >= 0 and batch_size >= 1")


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    a: list[np.ndarray]

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.y[idx], [t[idx] for t in self.a])


def stack(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    n_aux = len(examples[0].a)
    return Batch(
        x=np.stack([np.asarray(e.x, dtype=np.float64) for e in examples]),
        y=np.stack([np.asarray(e.y, dtype=np.int64) for e in examples]),
        a=[np.stack([np.asarray(e.a[h], dtype=np.float64) for e in examples]) for h in range(n_aux)],
    )


@dataclass
class LossTerms:
    total: Tensor
    primary: Tensor
    aux: list[Tensor]


def primary_loss(net: MtlNetwork, logits: Tensor, y: np.ndarray) -> Tensor:
    if net.topology.n_cells == 1:
        return ad.softmax_cross_entropy(logits, y)
    flat = ad.reshape(logits, (-1, net.topology.n_classes))
    return ad.softmax_cross_entropy(flat, y.reshape(-1))


def loss_terms(net: MtlNetwork, batch: Batch, lam: float) -> LossTerms:
    if len(batch.a) != net.topology.n_aux:
        raise ValueError(f"batch has {len(batch.a)} aux targets, network has {net.topology.n_aux} heads")
    out = net.run(Tensor(batch.x))
    lp = primary_loss(net, out.primary_logits, batch.y)
    aux = [ad.binary_cross_entropy(p, t) for p, t in zip(out.aux, batch.a)]
    total = lp
    if aux:
        la = aux[0]
        for term in aux[1:]:
            la = ad.add(la, term)
        total = ad.add(lp, ad.scale(la, lam))
    for name, term in [("primary", lp), *((f"aux[{h}]", t) for h, t in enumerate(aux))]:
        if not math.isfinite(term.item()):
            raise NumericError(f"non-finite {name} loss: {term.item()}")
    if not math.isfinite(total.item()):
        raise NumericError(f"non-finite total loss: {total.item()}")
    return LossTerms(total, lp, aux)


def total_loss(net: MtlNetwork, batch: Sequence[Example] | Batch, lam: float) -> Tensor:
    """Batch-mean primary loss plus ``lam`` times the sum of batch-mean aux losses."""
    if not isinstance(batch, Batch):
        batch = stack(batch)
    return loss_terms(net, batch, lam).total


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is None:
            raise ad.ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        p.data -= lr * p.grad


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    primary_loss: float
    aux_loss: list[float]


@dataclass
class TrainResult:
    net: MtlNetwork
    snapshot: WeightSnapshot
    history: list[EpochRecord] = field(default_factory=list)


def train(
    net: MtlNetwork,
    dataset: Sequence[Example] | Batch,
    cfg: TrainConfig,
    on_step: Callable[[int, MtlNetwork], None] | None = None,
) -> TrainResult:
    """Mini-batch SGD over ``cfg.epochs`` epochs; deterministic given ``cfg.seed``.

    The first ``cfg.pretrain_epochs`` epochs optimize the primary loss alone
    and leave auxiliary heads untouched; the rest optimize the joint loss.
    ``on_step`` is called after each backward pass, before the update.
    """
    data = dataset if isinstance(dataset, Batch) else stack(dataset)
    m = len(data)
    if m == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        joint = epoch >= cfg.pretrain_epochs
        params = net.parameters() if joint else net.parameters([TRUNK, PRIMARY])
        order = rng.permutation(m) if cfg.shuffle else np.arange(m)
        sums = np.zeros(2 + net.topology.n_aux)
        n_batches = 0
        for start in range(0, m, cfg.batch_size):
            batch = data.take(order[start : start + cfg.batch_size])
            net.zero_grad()
            try:
                with Tape():
                    terms = loss_terms(net, batch, cfg.lam)
                    objective = terms.total if joint else terms.primary
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            ad.backward(objective)
            if on_step is not None:
                on_step(step, net)
            sgd_step(params, cfg.lr)
            sums += [terms.total.item(), terms.primary.item(), *(t.item() for t in terms.aux)]
            n_batches += 1
            step += 1
        means = sums / n_batches
        history.append(EpochRecord(epoch, float(means[0]), float(means[1]), [float(v) for v in means[2:]]))
    snap = snapshot(net, seed=cfg.seed, epoch=cfg.epochs)
    return TrainResult(net, snap, history)


def write_history_csv(history: Sequence[EpochRecord], path, n_aux: int | None = None) -> None:
    if n_aux is None:
        n_aux = len(history[0].aux_loss) if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total_loss", "primary_loss", *(f"aux_loss_{h}" for h in range(n_aux))])
        for r in history:
            w.writerow([r.epoch, repr(r.total_loss), repr(r.primary_loss), *map(repr, r.aux_loss)])
