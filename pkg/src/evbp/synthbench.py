"""Deterministic synthetic tasks where auxiliary evidence resolves real ambiguity.

* ``ambiguous_blobs``: 2-D Gaussian classes; members of an ambiguous pair share
  a mean exactly, and the auxiliary tags name a coarse group that tells them
  apart.
* ``grid_seg``: small noisy grids with stamped shapes, labelled per cell.
  Aliased classes share a shape signature, so only the image-level tags
  (classes present, background excluded) disambiguate them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapt import Evidence
from .training import Example

BACKGROUND = 0


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# ambiguous blobs


@dataclass(frozen=True)
class AmbiguousBlobsSpec:
    n_train: int = 2000
    n_test: int = 400
    n_classes: int = 4
    ambiguous_pairs: tuple[tuple[int, int], ...] = ((0, 1),)
    blob_std: float = 0.5
    radius: float = 3.0
    seed: int = 7
    # one class->group table per auxiliary head; None derives a single head
    # whose two groups split every ambiguous pair
    aux_groupings: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ambiguous_pairs", tuple(tuple(int(c) for c in p) for p in self.ambiguous_pairs))
        if self.aux_groupings is not None:
            object.__setattr__(self, "aux_groupings", tuple(tuple(int(g) for g in h) for h in self.aux_groupings))

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be positive")
        if self.n_classes < 4:
            raise ValueError("ambiguous_blobs needs at least 4 classes")
        if self.blob_std <= 0:
            raise ValueError("blob_std must be positive")
        members = [c for pair in self.ambiguous_pairs for c in pair]
        if any(len(p) != 2 for p in self.ambiguous_pairs) or len(set(members)) != len(members):
            raise ValueError("ambiguous pairs must be disjoint pairs")
        if any(not 0 <= c < self.n_classes for c in members):
            raise ValueError("ambiguous pair class out of range")
        for table in self.groupings():
            if len(table) != self.n_classes or min(table) < 0:
                raise ValueError("aux grouping must assign a group to every class")

    def groupings(self) -> tuple[tuple[int, ...], ...]:
        if self.aux_groupings is not None:
            return self.aux_groupings
        return (default_grouping(self.n_classes, self.ambiguous_pairs),)

    def group_widths(self) -> tuple[int, ...]:
        return tuple(max(t) + 1 for t in self.groupings())

    def means(self) -> np.ndarray:
        """Per-class means; ambiguous pairs share one site on a circle."""
        site_of = {}
        n_sites = 0
        for c in range(self.n_classes):
            if c in site_of:
                continue
            site_of[c] = n_sites
            for a, b in self.ambiguous_pairs:
                if c in (a, b):
                    site_of[b if c == a else a] = n_sites
            n_sites += 1
        angles = 2 * np.pi * np.arange(n_sites) / n_sites
        sites = self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return np.stack([sites[site_of[c]] for c in range(self.n_classes)])


def default_grouping(n_classes: int, pairs: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    group = [c % 2 for c in range(n_classes)]
    for a, b in pairs:
        group[a], group[b] = 0, 1
    return tuple(group)


def split_pairs_across_heads(
    n_classes: int, pairs: Sequence[tuple[int, int]], n_heads: int
) -> tuple[tuple[int, ...], ...]:
    """Groupings where head ``j`` separates only pairs ``j, j + n_heads, ...``."""
    tables = []
    for j in range(n_heads):
        group = [c % 2 for c in range(n_classes)]
        for i, (a, b) in enumerate(pairs):
            group[a], group[b] = (0, 1) if i % n_heads == j else (0, 0)
        tables.append(tuple(group))
    return tuple(tables)


def _one_hot(idx: int, width: int) -> np.ndarray:
    v = np.zeros(width)
    v[idx] = 1.0
    return v


def gen_ambiguous_blobs(spec: AmbiguousBlobsSpec) -> tuple[list[Example], list[Example]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = spec.means()
    tables = spec.groupings()
    widths = spec.group_widths()

    def draw(n: int) -> list[Example]:
        labels = rng.integers(0, spec.n_classes, size=n)
        xs = means[labels] + spec.blob_std * rng.standard_normal((n, 2))
        return [
            Example(
                x=xs[i],
                y=int(labels[i]),
                a=tuple(_one_hot(t[labels[i]], w) for t, w in zip(tables, widths)),
            )
            for i in range(n)
        ]

    train = draw(spec.n_train)
    test = draw(spec.n_test)
    return train, test


# ---------------------------------------------------------------------------
# grid segmentation


SHAPES = ("rect", "cross", "ring", "bar")
EXTRA_HEADS = ("quadrants",)


@dataclass(frozen=True)
class GridSegSpec:
    grid: int = 8
    n_classes: int = 5  # background + 4 foreground
    shapes_per_image: tuple[int, int] = (1, 3)
    # shape signature per foreground class (index 0 -> class 1)
    signatures: tuple[str, ...] = ("rect", "cross", "ring", "ring")
    # sign of the stamped intensity, and the input channel it is stamped on,
    # per foreground class
    polarity: tuple[float, ...] = (1.0, -1.0, 1.0, 1.0)
    channel: tuple[int, ...] = (0, 0, 1, 1)
    aliased_pairs: tuple[tuple[int, int], ...] = ((3, 4),)
    noise_std: float = 0.6
    amplitude: tuple[float, float] = (0.5, 1.0)
    twin_rate: float = 0.05
    # "slots": one shape per quadrant at a random offset; "fixed": centred in
    # its quadrant; "free": anywhere with a one-cell gap
    layout: str = "fixed"
    n_train: int = 2000
    n_test: int = 400
    seed: int = 7
    max_retries: int = 200
    # additional auxiliary heads after the class tags; "quadrants" marks
    # which quadrants hold any foreground cell
    extra_heads: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "aliased_pairs", tuple(tuple(int(c) for c in p) for p in self.aliased_pairs))
        object.__setattr__(self, "signatures", tuple(self.signatures))
        object.__setattr__(self, "polarity", tuple(float(v) for v in self.polarity))
        object.__setattr__(self, "channel", tuple(int(v) for v in self.channel))
        object.__setattr__(self, "shapes_per_image", tuple(int(v) for v in self.shapes_per_image))
        object.__setattr__(self, "amplitude", tuple(float(v) for v in self.amplitude))
        object.__setattr__(self, "extra_heads", tuple(self.extra_heads))

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid

    @property
    def n_channels(self) -> int:
        return max(self.channel) + 1

    @property
    def input_dim(self) -> int:
        return self.n_channels * self.n_cells

    def ink(self, cls: int) -> tuple:
        return self.signatures[cls - 1], self.polarity[cls - 1], self.channel[cls - 1]

    @property
    def n_tags(self) -> int:
        return self.n_classes - 1

    def head_widths(self) -> tuple[int, ...]:
        return (self.n_tags, *(4 for _ in self.extra_heads))

    def targets(self, labels: np.ndarray) -> tuple[np.ndarray, ...]:
        """Auxiliary targets for a (grid, grid) label map, one per head."""
        out = [tags_of(labels, self.n_classes)]
        for _ in self.extra_heads:
            out.append(quadrants_of(labels))
        return tuple(out)

    def validate(self) -> None:
        if not 6 <= self.grid <= 12:
            raise ValueError("grid side must be in [6, 12]")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi <= 3:
            raise ValueError("shapes_per_image must satisfy 0 <= lo <= hi <= 3")
        if hi > self.n_tags:
            raise ValueError("more shapes per image than foreground classes")
        if len(self.signatures) != self.n_tags or any(s not in SHAPES for s in self.signatures):
            raise ValueError(f"need one signature from {SHAPES} per foreground class")
        if len(self.polarity) != self.n_tags or len(self.channel) != self.n_tags:
            raise ValueError("need one polarity and one channel per foreground class")
        if min(self.channel) < 0:
            raise ValueError("channel index must be >= 0")
        for a, b in self.aliased_pairs:
            if not (1 <= a < self.n_classes and 1 <= b < self.n_classes):
                raise ValueError("aliased pair must name foreground classes")
            if self.ink(a) != self.ink(b):
                raise ValueError(f"aliased classes {a},{b} must share a signature")
        if self.noise_std < 0 or not 0 < self.amplitude[0] <= self.amplitude[1]:
            raise ValueError("bad noise/amplitude")
        if not 0 <= self.twin_rate <= 1:
            raise ValueError("twin_rate must be in [0, 1]")
        if self.layout not in ("slots", "fixed", "free"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout != "free" and self.grid % 2:
            raise ValueError("slot layout needs an even grid side")
        if any(h not in EXTRA_HEADS for h in self.extra_heads):
            raise ValueError(f"extra heads must come from {EXTRA_HEADS}")


def _stencil(kind: str, rng) -> np.ndarray:
    if kind == "rect":
        return np.ones((2, 3) if rng.integers(2) else (3, 2), dtype=bool)
    if kind == "cross":
        s = np.zeros((3, 3), dtype=bool)
        s[1, :] = s[:, 1] = True
        return s
    if kind == "ring":
        s = np.ones((3, 3), dtype=bool)
        s[1, 1] = False
        return s
    if kind == "bar":
        return np.ones((1, 4), dtype=bool) if rng.integers(2) else np.ones((4, 1), dtype=bool)
    raise ValueError(kind)


def _try_place(spec: GridSegSpec, classes: Sequence[int], rng, attempts: int = 30):
    g = spec.grid
    labels = np.zeros((g, g), dtype=np.int64)
    clean = np.zeros((spec.n_channels, g, g))
    half = g // 2
    slots = rng.permutation(4)[: len(classes)] if spec.layout != "free" else [None] * len(classes)
    for cls, slot in zip(classes, slots):
        stencil = _stencil(spec.signatures[cls - 1], rng)
        amp = spec.polarity[cls - 1] * rng.uniform(*spec.amplitude)
        h, w = stencil.shape
        if slot is not None:
            if h > half or w > half:
                return None
            if spec.layout == "fixed":
                dr, dc = (half - h) // 2, (half - w) // 2
            else:
                dr, dc = rng.integers(0, half - h + 1), rng.integers(0, half - w + 1)
            r = (slot // 2) * half + dr
            c = (slot % 2) * half + dc
            labels[r : r + h, c : c + w][stencil] = cls
            clean[spec.channel[cls - 1], r : r + h, c : c + w][stencil] = amp
            continue
        for _ in range(attempts):
            r, c = rng.integers(0, g - h + 1), rng.integers(0, g - w + 1)
            # one-cell gap so shapes never touch
            r0, c0 = max(r - 1, 0), max(c - 1, 0)
            if not labels[r0 : r + h + 1, c0 : c + w + 1].any():
                labels[r : r + h, c : c + w][stencil] = cls
                clean[spec.channel[cls - 1], r : r + h, c : c + w][stencil] = amp
                break
        else:
            return None
    return labels, clean


def _place(spec: GridSegSpec, classes: Sequence[int], rng) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(spec.max_retries):
        placed = _try_place(spec, classes, rng)
        if placed is not None:
            return placed
    raise GenerationError(f"could not place classes {list(classes)} after {spec.max_retries} images")


def tags_of(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Image-level tag vector over foreground classes 1..n_classes-1."""
    present = np.zeros(n_classes - 1)
    for c in np.unique(labels):
        if c != BACKGROUND:
            present[c - 1] = 1.0
    return present


def quadrants_of(labels: np.ndarray) -> np.ndarray:
    """Occupancy bits for the four quadrants, row-major."""
    half = labels.shape[0] // 2
    fg = labels != BACKGROUND
    return np.array(
        [fg[:half, :half].any(), fg[:half, half:].any(), fg[half:, :half].any(), fg[half:, half:].any()],
        dtype=np.float64,
    )


def _alias_swap(labels: np.ndarray, pairs) -> np.ndarray | None:
    out = labels.copy()
    swapped = False
    for a, b in pairs:
        has_a, has_b = (labels == a).any(), (labels == b).any()
        if has_a != has_b:
            out[labels == a] = b
            out[labels == b] = a
            swapped = True
    return out if swapped else None


def gen_grid_segmentation(spec: GridSegSpec) -> tuple[list[Example], list[Example]]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.shapes_per_image
    fg = np.arange(1, spec.n_classes)

    def draw(n: int) -> list[Example]:
        out: list[Example] = []
        for _ in range(n):
            if out and rng.random() < spec.twin_rate:
                twin = _alias_swap(np.asarray(out[-1].y).reshape(spec.grid, spec.grid), spec.aliased_pairs)
                if twin is not None:
                    prev = out[-1]
                    out.append(Example(prev.x, twin.reshape(-1), spec.targets(twin)))
                    continue
            k = int(rng.integers(lo, hi + 1))
            classes = rng.choice(fg, size=k, replace=False)
            labels, clean = _place(spec, classes, rng)
            x = clean + spec.noise_std * rng.standard_normal(clean.shape)
            out.append(Example(x.reshape(-1), labels.reshape(-1), spec.targets(labels)))
        return out

    train = draw(spec.n_train)
    test = draw(spec.n_test)
    return train, test


# ---------------------------------------------------------------------------
# evidence helpers


def evidence_of(ex: Example, heads: Sequence[int] | None = None) -> Evidence:
    return Evidence.from_vectors(ex.a, heads)


def add_noisy_tags(e: Evidence, k: int, seed: int, head: int | None = None) -> Evidence:
    """Flip ``k`` uniformly chosen absent tags of one head to present.

    ``head`` defaults to the first evidenced head. True tags are never removed.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return e
    head = e.heads[0] if head is None else head
    rng = np.random.default_rng(seed)
    targets = []
    for h, vec in e.targets:
        if h == head:
            absent = np.flatnonzero(vec == 0.0)
            if k > absent.size:
                raise ValueError(f"asked for {k} noisy tags but only {absent.size} are absent")
            vec = vec.copy()
            vec[rng.choice(absent, size=k, replace=False)] = 1.0
        targets.append((h, vec))
    return Evidence(tuple(targets))


# ---------------------------------------------------------------------------
# dataset files


def write_dataset(examples: Sequence[Example], path: str | Path) -> None:
    """One line per example: ``id<TAB>x values<TAB>y values<TAB>tags``.

    Values are comma-separated ``repr`` floats/ints; tags are one bit string
    per auxiliary head, heads separated by ``|``.
    """
    with open(path, "w") as fh:
        for i, ex in enumerate(examples):
            xs = ",".join(repr(float(v)) for v in np.ravel(ex.x))
            ys = ",".join(str(int(v)) for v in np.ravel(ex.y))
            tags = "|".join("".join(str(int(b)) for b in vec) for vec in ex.a)
            fh.write(f"{i}\t{xs}\t{ys}\t{tags}\n")


def read_dataset(path: str | Path) -> list[Example]:
    out = []
    with open(path) as fh:
        for line in fh:
            _, xs, ys, tags = line.rstrip("\n").split("\t")
            y = np.array([int(v) for v in ys.split(",")], dtype=np.int64)
            a = tuple(np.array([float(b) for b in head]) for head in tags.split("|")) if tags else ()
            out.append(Example(np.array([float(v) for v in xs.split(",")]), int(y[0]) if y.size == 1 else y, a))
    return out


def replace(spec, **changes):
    return dataclasses.replace(spec, **changes)
