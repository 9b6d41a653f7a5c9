"""Label pruning from image-level tags, and the seven-variant comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adapt import AdaptConfig, AdaptationTrace, Evidence, predict_with_evidence
from .metrics import MetricsReport, compute_metrics
from .model import MtlNetwork, WeightSnapshot, network_from_snapshot, restore

PRIMARY_ONLY = "primary-only"
MTL = "MTL"
MTL_PRUNE = "MTL+prune"
BP_ES = "BP-ES"
BP_ES_PRUNE = "BP-ES+prune"
BP_L2 = "BP-L2"
BP_L2_PRUNE = "BP-L2+prune"
VARIANTS = (PRIMARY_ONLY, MTL, MTL_PRUNE, BP_ES, BP_ES_PRUNE, BP_L2, BP_L2_PRUNE)
EVIDENCE_VARIANTS = (MTL_PRUNE, BP_ES, BP_ES_PRUNE, BP_L2, BP_L2_PRUNE)
METRIC_COLUMNS = ("variant", "accuracy", "mIoU", "precision", "recall", "f1")


@dataclass(frozen=True)
class TagSet:
    allowed: frozenset[int]
    background_always_allowed: bool = True
    background: int = 0

    @property
    def classes(self) -> frozenset[int]:
        if self.background_always_allowed:
            return self.allowed | {self.background}
        return self.allowed

    @classmethod
    def from_tags(
        cls, tags, class_tag: Sequence[int | None], background: int = 0
    ) -> "TagSet":
        """Allowed classes under a tag vector.

        ``class_tag[c]`` is the tag index that licenses class ``c``; ``None``
        marks a class that is always allowed (the background).
        """
        tags = np.asarray(tags)
        allowed = frozenset(c for c, t in enumerate(class_tag) if t is not None and tags[t] > 0.5)
        always = any(t is None for t in class_tag)
        return cls(allowed, always, background)


def prune(probs: np.ndarray, tags: TagSet) -> np.ndarray:
    """Zero the probability of every class outside ``tags``; no renormalization.

    Works on any array whose last axis is the class axis. Rows left all-zero
    give the background probability 1.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n_classes = probs.shape[-1]
    keep = np.zeros(n_classes, dtype=bool)
    for c in tags.classes:
        if not 0 <= c < n_classes:
            raise IndexError(f"tag class {c} out of range for {n_classes} classes")
        keep[c] = True
    out = np.where(keep, probs, 0.0)
    dead = ~out.any(axis=-1)
    if dead.any():
        out[dead, tags.background] = 1.0
    return out


@dataclass(frozen=True)
class EvalConfig:
    es: AdaptConfig
    l2: AdaptConfig
    n_classes: int
    class_tag: tuple[int | None, ...]
    kind: str = "segmentation"
    background: int | None = 0
    tag_head: int = 0  # head whose evidence drives pruning
    evidence_heads: tuple[int, ...] | None = None  # None: every head
    threshold: float = 0.5
    variants: tuple[str, ...] = VARIANTS


@dataclass
class VariantResult:
    variant: str
    metrics: MetricsReport
    predictions: np.ndarray
    traces: list[AdaptationTrace] = field(default_factory=list)

    @property
    def mean_deviation(self) -> float:
        if not self.traces:
            return 0.0
        return float(np.mean([t.weight_deviation[-1] for t in self.traces]))


def _score(probs: np.ndarray, targets: np.ndarray, cfg: EvalConfig) -> tuple[MetricsReport, np.ndarray]:
    pred = probs.argmax(-1)
    conf = probs.max(-1)
    report = compute_metrics(pred, targets, cfg.n_classes, cfg.kind, conf, cfg.threshold, cfg.background)
    return report, pred


def forward_each(net: MtlNetwork, xs: Sequence[np.ndarray]) -> np.ndarray:
    """Primary probabilities one instance at a time.

    Same arithmetic as the adapted path, so a zero-iteration adaptation
    reproduces these values bit for bit (a batched matmul may not).
    """
    return np.stack([net.run(np.asarray(x)[None], aux=()).primary.data[0] for x in xs])


def adapt_all(
    net: MtlNetwork,
    snap: WeightSnapshot,
    xs: Sequence[np.ndarray],
    evidences: Sequence[Evidence],
    cfg: AdaptConfig,
    workers: int = 1,
) -> tuple[np.ndarray, list[AdaptationTrace]]:
    """Evidence-adapted primary probabilities for every instance, in input order."""
    if workers > 1 and len(xs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = np.array_split(np.arange(len(xs)), workers)
        jobs = [(snap, [xs[i] for i in c], [evidences[i] for i in c], cfg) for c in chunks if len(c)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_adapt_chunk, jobs))
        probs = np.concatenate([p for p, _ in parts])
        traces = [t for _, ts in parts for t in ts]
        return probs, traces
    probs, traces = [], []
    for x, e in zip(xs, evidences):
        y, trace = predict_with_evidence(net, x, e, snap, cfg)
        probs.append(y)
        traces.append(trace)
    return np.stack(probs), traces


def _adapt_chunk(job):
    snap, xs, evidences, cfg = job
    net = network_from_snapshot(snap)
    return adapt_all(net, snap, xs, evidences, cfg, workers=1)


def evaluate_variants(
    nets: dict[str, MtlNetwork],
    snap: WeightSnapshot,
    xs: np.ndarray,
    targets: np.ndarray,
    evidences: Sequence[Evidence],
    cfg: EvalConfig,
    workers: int = 1,
    prune_fn: Callable[[np.ndarray, TagSet], np.ndarray] = prune,
) -> list[VariantResult]:
    """Score each requested variant on one test set.

    ``nets`` maps ``"primary-only"`` (optional) and ``"MTL"`` to trained
    networks; ``snap`` is the MTL network's trained weights. Pruned variants
    prune each instance's final primary output once, after any adaptation.
    """
    mtl = nets[MTL]
    restore(mtl, snap)
    tagsets = [
        TagSet.from_tags(dict(e.targets)[cfg.tag_head], cfg.class_tag, cfg.background or 0) for e in evidences
    ]
    if cfg.evidence_heads is not None:
        evidences = [Evidence(tuple((h, v) for h, v in e.targets if h in cfg.evidence_heads)) for e in evidences]

    def pruned(probs: np.ndarray) -> np.ndarray:
        return np.stack([prune_fn(p, t) for p, t in zip(probs, tagsets)])

    results: list[VariantResult] = []
    cache: dict[str, tuple[np.ndarray, list[AdaptationTrace]]] = {}

    def adapted(kind: str):
        if kind not in cache:
            cache[kind] = adapt_all(mtl, snap, xs, evidences, cfg.es if kind == "es" else cfg.l2, workers)
        return cache[kind]

    for variant in cfg.variants:
        traces: list[AdaptationTrace] = []
        if variant == PRIMARY_ONLY:
            probs = forward_each(nets[PRIMARY_ONLY], xs)
        elif variant == MTL:
            probs = forward_each(mtl, xs)
        elif variant == MTL_PRUNE:
            probs = pruned(forward_each(mtl, xs))
        elif variant in (BP_ES, BP_ES_PRUNE, BP_L2, BP_L2_PRUNE):
            probs, traces = adapted("es" if variant.startswith(BP_ES) else "l2")
            if variant.endswith("+prune"):
                probs = pruned(probs)
        else:
            raise ValueError(f"unknown variant {variant!r}")
        report, pred = _score(probs, targets, cfg)
        results.append(VariantResult(variant, report, pred, traces))
    return results


def write_metrics_csv(results: Sequence[VariantResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in results:
            row = r.metrics.as_row()
            w.writerow([r.variant, *(repr(row[c]) for c in METRIC_COLUMNS[1:])])
