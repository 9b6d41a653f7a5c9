"""Hard-parameter-sharing multi-task network.

A shared trunk maps ``x`` to the representation ``z``. The primary head reads
``z`` and emits a class distribution (or one per grid cell); every auxiliary
head reads the same ``z`` and emits independent sigmoid probabilities.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TRUNK = "trunk"
PRIMARY = "primary"


class IntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    """Layer sizes and output kinds; enough to rebuild an untrained network."""

    input_dim: int
    n_classes: int
    aux_widths: tuple[int, ...] = ()
    trunk: tuple[int, ...] = (32, 16)
    activation: str = "tanh"
    n_cells: int = 1
    primary_hidden: tuple[int, ...] = ()
    aux_hidden: tuple[int, ...] = ()

    def __post_init__(self):
        if self.input_dim < 1 or self.n_classes < 2 or self.n_cells < 1:
            raise ValueError(f"invalid topology {self}")
        if not self.trunk:
            raise ValueError("trunk needs at least one layer")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        # normalize lists coming from json/yaml
        for name in ("aux_widths", "trunk", "primary_hidden", "aux_hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    @property
    def z_dim(self) -> int:
        return self.trunk[-1]

    @property
    def primary_output_kind(self) -> str:
        return "class-distribution" if self.n_cells == 1 else "per-cell-class-distribution"

    @property
    def n_aux(self) -> int:
        return len(self.aux_widths)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(**d)


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor
    activation: str

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.add_bias(ad.matmul(x, self.weight), self.bias)
        return ad.ACTIVATIONS[self.activation](h)

    @property
    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class ParameterPartition:
    """The three disjoint parameter groups: trunk, primary head, per-aux-head."""

    trunk: list[Tensor]
    primary_head: list[Tensor]
    aux_heads: list[list[Tensor]]

    def groups(self) -> dict[str, list[Tensor]]:
        out = {TRUNK: self.trunk, PRIMARY: self.primary_head}
        for i, head in enumerate(self.aux_heads):
            out[aux_group(i)] = head
        return out

    def all(self) -> list[Tensor]:
        return [p for group in self.groups().values() for p in group]


def aux_group(i: int) -> str:
    return f"aux{i}"


@dataclass
class ForwardOutput:
    z: Tensor
    primary_logits: Tensor | None
    primary: Tensor | None
    aux_logits: list[Tensor | None]
    aux: list[Tensor | None]


def _build_stack(rng, prefix, fan_in, sizes, hidden_act, final_act) -> list[Dense]:
    layers = []
    for i, fan_out in enumerate(sizes):
        bound = 1.0 / math.sqrt(fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), True, f"{prefix}.{i}.weight")
        b = Tensor(rng.uniform(-bound, bound, size=fan_out), True, f"{prefix}.{i}.bias")
        act = final_act if i == len(sizes) - 1 else hidden_act
        layers.append(Dense(w, b, act))
        fan_in = fan_out
    return layers


class MtlNetwork:
    """Shared trunk + primary head + ``N`` auxiliary heads (``N`` may be 0).

    Parameters are initialized uniformly in ``±1/sqrt(fan_in)``, trunk first,
    then the primary head, then auxiliary heads in order, so two networks
    built from the same seed share trunk and primary weights regardless of
    how many auxiliary heads they carry.
    """

    def __init__(self, topology: Topology, seed: int = 0):
        self.topology = topology
        rng = np.random.default_rng(seed)
        t = topology
        self.trunk = _build_stack(rng, TRUNK, t.input_dim, t.trunk, t.activation, t.activation)
        self.primary = _build_stack(
            rng, PRIMARY, t.z_dim, t.primary_hidden + (t.n_cells * t.n_classes,),
            t.activation, "identity",
        )
        self.aux = [
            _build_stack(rng, aux_group(i), t.z_dim, t.aux_hidden + (w,), t.activation, "identity")
            for i, w in enumerate(t.aux_widths)
        ]

    # -- parameters -------------------------------------------------------

    @property
    def partition(self) -> ParameterPartition:
        return ParameterPartition(
            trunk=[p for layer in self.trunk for p in layer.params],
            primary_head=[p for layer in self.primary for p in layer.params],
            aux_heads=[[p for layer in head for p in layer.params] for head in self.aux],
        )

    def parameters(self, groups: Iterable[str] | None = None) -> list[Tensor]:
        by_group = self.partition.groups()
        if groups is None:
            return [p for g in by_group.values() for p in g]
        return [p for g in groups for p in by_group[g]]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "MtlNetwork":
        return copy.deepcopy(self)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- evaluation -------------------------------------------------------

    def run(self, x, primary: bool = True, aux: Sequence[int] | None = None) -> ForwardOutput:
        """Forward pass; ``aux`` selects which auxiliary heads to evaluate (default all)."""
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if x.data.ndim != 2 or x.shape[1] != self.topology.input_dim:
            raise ad.DimensionError(
                f"input width {x.shape[-1]} does not match trunk input {self.topology.input_dim}"
            )
        z = x
        for layer in self.trunk:
            z = layer(z)

        y_logits = y = None
        if primary:
            h = z
            for layer in self.primary:
                h = layer(h)
            y_logits = h
            if self.topology.n_cells == 1:
                y = ad.softmax(h)
            else:
                n = x.shape[0]
                y = ad.softmax(ad.reshape(h, (n, self.topology.n_cells, self.topology.n_classes)))

        selected = range(len(self.aux)) if aux is None else aux
        a_logits: list[Tensor | None] = [None] * len(self.aux)
        a_probs: list[Tensor | None] = [None] * len(self.aux)
        for i in selected:
            h = z
            for layer in self.aux[i]:
                h = layer(h)
            a_logits[i] = h
            a_probs[i] = ad.sigmoid(h)
        return ForwardOutput(z, y_logits, y, a_logits, a_probs)

    def forward(self, x) -> tuple[Tensor, Tensor, list[Tensor]]:
        out = self.run(x)
        return out.z, out.primary, out.aux

    def predict_proba(self, x) -> np.ndarray:
        return self.run(x, aux=()).primary.data


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class WeightSnapshot:
    """Bit-exact copy of every parameter, keyed by name."""

    arrays: dict[str, np.ndarray]
    topology: Topology
    provenance: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.arrays:
            h.update(_le_bytes(self.arrays[name]))
        return h.hexdigest()

    def diff(self, net: MtlNetwork) -> list[str]:
        """Names of parameters whose current value differs bit-wise."""
        current = net.named_parameters()
        return [
            name
            for name, arr in self.arrays.items()
            if name not in current or _le_bytes(arr) != _le_bytes(current[name].data)
        ]


def _le_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def snapshot(net: MtlNetwork, **provenance) -> WeightSnapshot:
    arrays = {name: p.data.copy() for name, p in net.named_parameters().items()}
    return WeightSnapshot(arrays, net.topology, dict(provenance))


def restore(net: MtlNetwork, snap: WeightSnapshot) -> None:
    params = net.named_parameters()
    if set(params) != set(snap.arrays):
        missing = sorted(set(params) ^ set(snap.arrays))
        raise IntegrityError(f"snapshot/network parameter names differ: {missing[:6]}")
    for name, p in params.items():
        src = snap.arrays[name]
        if src.shape != p.data.shape:
            raise IntegrityError(f"{name}: snapshot shape {src.shape} vs {p.data.shape}")
        np.copyto(p.data, src)
        p.grad = np.zeros_like(p.data)


def network_from_snapshot(snap: WeightSnapshot) -> MtlNetwork:
    net = MtlNetwork(snap.topology)
    restore(net, snap)
    return net


def weight_deviation(net: MtlNetwork, snap: WeightSnapshot, groups: Iterable[str]) -> float:
    """Frobenius distance between current and snapshot weights over ``groups``."""
    total = 0.0
    for p in net.parameters(groups):
        d = p.data - snap.arrays[p.name]
        total += float(np.sum(d * d))
    return math.sqrt(total)


_MAGIC = b"EVBP-SNAPSHOT 1\n"


def save_snapshot(snap: WeightSnapshot, path: str | Path) -> str:
    """Write ``snap`` and return its checksum.

    Layout: magic line, one JSON header line (topology, provenance, record
    count, sha256 over all data bytes), then per parameter a text line
    ``name<TAB>d1,d2,...`` followed by the little-endian float64 payload.
    """
    digest = snap.checksum()
    header = {
        "topology": snap.topology.to_dict(),
        "provenance": snap.provenance,
        "records": len(snap.arrays),
        "checksum": digest,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, arr in snap.arrays.items():
            dims = ",".join(str(d) for d in arr.shape)
            fh.write(f"{name}\t{dims}\n".encode())
            fh.write(_le_bytes(arr))
    return digest


def load_snapshot(path: str | Path) -> WeightSnapshot:
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise IntegrityError(f"{path}: not a snapshot file")
        header = json.loads(fh.readline())
        arrays: dict[str, np.ndarray] = {}
        for _ in range(header["records"]):
            name, dims = fh.readline().decode().rstrip("\n").split("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise IntegrityError(f"{path}: truncated record {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    snap = WeightSnapshot(arrays, Topology.from_dict(header["topology"]), header["provenance"])
    if snap.checksum() != header["checksum"]:
        raise IntegrityError(f"{path}: checksum mismatch")
    return snap
