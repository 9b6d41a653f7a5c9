"""Test-time weight re-adjustment from auxiliary evidence.

For one test input, the loss between the auxiliary outputs and the observed
evidence is back-propagated into the trunk and the evidenced auxiliary heads
for a fixed number of iterations. The primary head never moves. Drift from
the trained weights is limited either by stopping early or by a squared
two-norm penalty ``alpha * ||W - W*||^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import TRUNK, MtlNetwork, WeightSnapshot, aux_group, restore, weight_deviation

EARLY_STOP = "early_stop"
TWO_NORM = "two_norm"


class AdaptationError(RuntimeError):
    def __init__(self, message: str, trace: "AdaptationTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Evidence:
    """Observed targets for a subset of auxiliary heads, as ``(head, vector)`` pairs."""

    targets: tuple[tuple[int, np.ndarray], ...]

    @classmethod
    def from_vectors(cls, vectors: Sequence, heads: Sequence[int] | None = None) -> "Evidence":
        heads = range(len(vectors)) if heads is None else heads
        return cls(tuple((int(h), np.asarray(vectors[h], dtype=np.float64)) for h in heads))

    @property
    def heads(self) -> list[int]:
        return [h for h, _ in self.targets]

    def validate(self, net: MtlNetwork) -> None:
        widths = net.topology.aux_widths
        seen = set()
        for h, vec in self.targets:
            if not 0 <= h < len(widths):
                raise ValueError(f"evidence for head {h}, network has {len(widths)} aux heads")
            if h in seen:
                raise ValueError(f"duplicate evidence for head {h}")
            seen.add(h)
            if vec.shape != (widths[h],):
                raise ValueError(f"head {h} evidence has shape {vec.shape}, expected ({widths[h]},)")
            if not np.all((vec == 0.0) | (vec == 1.0)):
                raise ValueError(f"head {h} evidence is not binary")


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 2
    lr: float = 7e-4
    regularizer: str = EARLY_STOP
    alpha: float = 1.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.regularizer not in (EARLY_STOP, TWO_NORM):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def penalty(self) -> float:
        """Penalty weight actually applied; early stopping uses none."""
        return 0.0 if self.regularizer == EARLY_STOP else self.alpha


def early_stop(iterations: int = 2, lr: float = 7e-4, **kw) -> AdaptConfig:
    return AdaptConfig(iterations=iterations, lr=lr, regularizer=EARLY_STOP, **kw)


def two_norm(alpha: float = 1.0, iterations: int = 10, lr: float = 7e-4, **kw) -> AdaptConfig:
    return AdaptConfig(iterations=iterations, lr=lr, regularizer=TWO_NORM, alpha=alpha, **kw)


@dataclass
class AdaptationTrace:
    evidence_loss: list[float] = field(default_factory=list)
    weight_deviation: list[float] = field(default_factory=list)


def _as_row(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1))


def adapted_groups(e: Evidence) -> list[str]:
    return [TRUNK, *(aux_group(h) for h in e.heads)]


def evidence_loss(net: MtlNetwork, x, e: Evidence) -> Tensor:
    out = net.run(_as_row(x), primary=False, aux=e.heads)
    loss = None
    for h, target in e.targets:
        term = ad.binary_cross_entropy(out.aux[h], target.reshape(1, -1))
        loss = term if loss is None else ad.add(loss, term)
    if loss is None:
        raise ValueError("evidence covers no auxiliary head")
    return loss


def _penalty(net: MtlNetwork, snap: WeightSnapshot, groups: Iterable[str]) -> Tensor:
    terms = [ad.squared_distance(p, snap.arrays[p.name]) for p in net.parameters(groups)]
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def test_loss(net: MtlNetwork, x, e: Evidence, snap: WeightSnapshot, alpha: float) -> Tensor:
    """Evidence loss summed over evidenced heads plus ``alpha * ||W - W*||^2``.

    The penalty covers the trunk and the evidenced auxiliary heads, biases
    included. The primary head is not part of the graph.
    """
    e.validate(net)
    missing = [p.name for p in net.parameters() if p.name not in snap.arrays]
    if missing:
        raise ValueError(f"snapshot lacks parameters {missing[:4]}")
    loss = evidence_loss(net, x, e)
    if alpha:
        loss = ad.add(loss, ad.scale(_penalty(net, snap, adapted_groups(e)), alpha))
    return loss


# Prevent pytest from collecting the function above when imported into tests.
test_loss.__test__ = False


class _Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, params: Sequence[Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adapt(
    net: MtlNetwork, x, e: Evidence, snap: WeightSnapshot, cfg: AdaptConfig
) -> tuple[MtlNetwork, AdaptationTrace]:
    """Run ``cfg.iterations`` update steps in place; the caller restores afterwards.

    With SGD the penalty is applied in closed form, as the proximal step
    ``W <- W* + (W - W* - lr * grad_e) / (1 + 2 * lr * alpha)``, which is
    stable for any ``alpha``; at ``alpha = 0`` it is plain ``W -= lr * grad_e``.
    Adam differentiates the full penalized objective with fresh moment state.
    """
    e.validate(net)
    groups = adapted_groups(e)
    params = net.parameters(groups)
    alpha = cfg.penalty
    shrink = 1.0 + 2.0 * cfg.lr * alpha
    adam = _Adam(params, cfg.lr) if cfg.optimizer == "adam" else None
    trace = AdaptationTrace()
    xrow = _as_row(x)

    def record(loss_value: float) -> None:
        trace.evidence_loss.append(loss_value)
        trace.weight_deviation.append(weight_deviation(net, snap, [TRUNK, *_all_aux(net)]))
        if not math.isfinite(loss_value):
            raise AdaptationError(f"non-finite evidence loss at iteration {len(trace.evidence_loss) - 1}", trace)

    for _ in range(cfg.iterations):
        for p in params:
            p.zero_grad()
        with Tape():
            ev = evidence_loss(net, xrow, e)
            objective = ev
            if adam is not None and alpha:
                objective = ad.add(ev, ad.scale(_penalty(net, snap, groups), alpha))
        record(ev.item())
        ad.backward(objective)
        if adam is not None:
            adam.step(params)
        elif alpha:
            for p in params:
                anchor = snap.arrays[p.name]
                p.data[...] = anchor + (p.data - anchor - cfg.lr * p.grad) / shrink
        else:
            for p in params:
                p.data -= cfg.lr * p.grad
    record(evidence_loss(net, xrow, e).item())
    return net, trace


def _all_aux(net: MtlNetwork) -> list[str]:
    return [aux_group(i) for i in range(net.topology.n_aux)]


def predict_with_evidence(
    net: MtlNetwork, x, e: Evidence, snap: WeightSnapshot, cfg: AdaptConfig
) -> tuple[np.ndarray, AdaptationTrace]:
    """Primary prediction for one instance after adapting to ``e``.

    The network is reset to ``snap`` before adapting and again on exit, so
    instances never influence one another.
    """
    restore(net, snap)
    try:
        _, trace = adapt(net, x, e, snap, cfg)
        y = net.run(_as_row(x), aux=()).primary.data[0].copy()
    finally:
        restore(net, snap)
    return y, trace


def write_traces_csv(rows: Iterable[tuple[object, AdaptationTrace]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "iteration", "evidence_loss", "weight_deviation"])
        for instance_id, trace in rows:
            for i, (loss, dev) in enumerate(zip(trace.evidence_loss, trace.weight_deviation)):
                w.writerow([instance_id, i, repr(loss), repr(dev)])
