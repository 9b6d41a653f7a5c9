"""Config-driven experiment driver.

    evbp train       --config run.yaml --out runs/grid
    evbp eval        --config run.yaml --out runs/grid [--workers 4]
    evbp sensitivity --config run.yaml --out runs/grid
    evbp gen-data    --config run.yaml --out runs/grid

A config is a YAML mapping; anything it leaves out comes from the defaults of
its ``benchmark``. Every CSV gets a ``.digest`` sidecar with the sha256 of the
resolved config and of the file itself.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import baselines as bl
from .adapt import AdaptationError, AdaptConfig, Evidence, write_traces_csv
from .autodiff import DomainError
from .model import IntegrityError, MtlNetwork, Topology, WeightSnapshot, load_snapshot, network_from_snapshot, save_snapshot
from .synthbench import (
    AmbiguousBlobsSpec,
    GenerationError,
    GridSegSpec,
    add_noisy_tags,
    evidence_of,
    gen_ambiguous_blobs,
    gen_grid_segmentation,
    write_dataset,
)
from .training import Example, TrainConfig, TrainingError, stack, train, write_history_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

GRID_SEG = "grid_seg"
BLOBS = "ambiguous_blobs"

DEFAULTS: dict[str, dict] = {
    GRID_SEG: {
        "seed": 7,
        "spec": {},
        "model": {"trunk": [256, 256], "activation": "tanh"},
        "train": {"lam": 1.0, "lr": 2.0, "epochs": 60, "batch_size": 16, "pretrain_epochs": 0},
        "adapt": {
            "es": {"iterations": 2, "lr": 0.3},
            "l2": {"iterations": 2, "lr": 0.3, "alpha": 1.0},
            "optimizer": "sgd",
        },
        "variants": list(bl.VARIANTS),
        "evidence_heads": None,
        "threshold": 0.5,
        "sweeps": {"T": [0, 1, 2, 5], "alpha": [0.0, 0.1, 1.0, 10.0, 1000.0], "noise_k": [0, 1, 2, 3]},
        "sensitivity": {"T": [0, 1, 2, 5, 10, 25], "alpha": [0.0, 1.0], "lr": None},
        "noise_seed": 1000,
    },
    BLOBS: {
        "seed": 7,
        "spec": {},
        "model": {"trunk": [32, 16], "activation": "tanh"},
        "train": {"lam": 1.0, "lr": 0.3, "epochs": 30, "batch_size": 32, "pretrain_epochs": 10},
        "adapt": {
            "es": {"iterations": 2, "lr": 0.3},
            "l2": {"iterations": 2, "lr": 0.3, "alpha": 1.0},
            "optimizer": "sgd",
        },
        "variants": list(bl.VARIANTS),
        "evidence_heads": None,
        "threshold": 0.5,
        "sweeps": {"T": [0, 1, 2, 5], "alpha": [0.0, 0.1, 1.0, 10.0, 1000.0], "noise_k": [0]},
        "sensitivity": {"T": [0, 1, 2, 5, 10, 25], "alpha": [0.0, 1.0], "lr": None},
        "noise_seed": 1000,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    benchmark: str
    seed: int
    spec: dict
    model: dict
    train: dict
    adapt: dict
    variants: tuple[str, ...]
    evidence_heads: tuple[int, ...] | None
    threshold: float
    sweeps: dict
    sensitivity: dict
    noise_seed: int

    @classmethod
    def from_dict(cls, raw: dict | None, seed: int | None = None) -> "RunConfig":
        raw = dict(raw or {})
        bench = raw.pop("benchmark", GRID_SEG)
        if bench not in DEFAULTS:
            raise ConfigError(f"unknown benchmark {bench!r}; expected one of {sorted(DEFAULTS)}")
        known = {f.name for f in fields(cls)} - {"benchmark"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = _merge(DEFAULTS[bench], raw)
        if seed is not None:
            d["seed"] = seed
        heads = d["evidence_heads"]
        cfg = cls(
            benchmark=bench,
            seed=int(d["seed"]),
            spec=d["spec"],
            model=d["model"],
            train=d["train"],
            adapt=d["adapt"],
            variants=tuple(d["variants"]),
            evidence_heads=None if heads is None else tuple(int(h) for h in heads),
            threshold=float(d["threshold"]),
            sweeps=d["sweeps"],
            sensitivity=d["sensitivity"],
            noise_seed=int(d["noise_seed"]),
        )
        cfg.check()
        return cfg

    def check(self) -> None:
        """Build every derived object once so bad values surface as ConfigError."""
        try:
            self.bench_spec().validate()
            self.topology()
            self.train_config()
            self.es_config()
            self.l2_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        bad = [v for v in self.variants if v not in bl.VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; expected from {list(bl.VARIANTS)}")
        if any(int(k) < 0 for k in self.sweeps.get("noise_k", [])):
            raise ConfigError("noise_k values must be >= 0")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["evidence_heads"] = None if self.evidence_heads is None else list(self.evidence_heads)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- derived objects

    def bench_spec(self) -> GridSegSpec | AmbiguousBlobsSpec:
        kw = dict(self.spec)
        kw["seed"] = self.seed
        if self.benchmark == GRID_SEG:
            for key in ("aliased_pairs",):
                if key in kw:
                    kw[key] = tuple(tuple(p) for p in kw[key])
            return GridSegSpec(**kw)
        if "ambiguous_pairs" in kw:
            kw["ambiguous_pairs"] = tuple(tuple(p) for p in kw["ambiguous_pairs"])
        return AmbiguousBlobsSpec(**kw)

    def topology(self, with_aux: bool = True) -> Topology:
        spec = self.bench_spec()
        m = dict(self.model)
        if isinstance(spec, GridSegSpec):
            base = dict(input_dim=spec.input_dim, n_classes=spec.n_classes, n_cells=spec.n_cells)
            widths = spec.head_widths()
        else:
            base = dict(input_dim=2, n_classes=spec.n_classes)
            widths = spec.group_widths()
        return Topology(**base, aux_widths=widths if with_aux else (), **m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def _adapt(self, key: str, regularizer: str) -> AdaptConfig:
        kw = dict(self.adapt[key])
        kw.setdefault("optimizer", self.adapt.get("optimizer", "sgd"))
        return AdaptConfig(regularizer=regularizer, **kw)

    def es_config(self) -> AdaptConfig:
        return self._adapt("es", "early_stop")

    def l2_config(self) -> AdaptConfig:
        return self._adapt("l2", "two_norm")

    def class_tag(self) -> tuple[int | None, ...]:
        """Tag index (of the pruning head) that licenses each primary class."""
        spec = self.bench_spec()
        if isinstance(spec, GridSegSpec):
            return (None, *range(spec.n_tags))
        return spec.groupings()[0]

    def eval_config(self, **changes) -> bl.EvalConfig:
        grid = self.benchmark == GRID_SEG
        kw = dict(
            es=self.es_config(),
            l2=self.l2_config(),
            n_classes=self.bench_spec().n_classes,
            class_tag=self.class_tag(),
            kind="segmentation" if grid else "classification",
            background=0 if grid else None,
            evidence_heads=self.evidence_heads,
            threshold=self.threshold,
            variants=self.variants,
        )
        kw.update(changes)
        return bl.EvalConfig(**kw)


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    return RunConfig.from_dict(raw, seed)


# ---------------------------------------------------------------------------
# pipeline pieces shared by the verbs


def generate(cfg: RunConfig) -> tuple[list[Example], list[Example]]:
    spec = cfg.bench_spec()
    if isinstance(spec, GridSegSpec):
        return gen_grid_segmentation(spec)
    return gen_ambiguous_blobs(spec)


def train_networks(cfg: RunConfig, train_set: Sequence[Example]):
    """Train the MTL network and, when requested, the primary-only network."""
    tc = cfg.train_config()
    mtl = train(MtlNetwork(cfg.topology(), seed=cfg.seed), train_set, tc)
    solo = None
    if bl.PRIMARY_ONLY in cfg.variants:
        bare = [Example(ex.x, ex.y, ()) for ex in train_set]
        solo = train(MtlNetwork(cfg.topology(with_aux=False), seed=cfg.seed), bare, tc)
    return mtl, solo


@dataclass
class TestSet:
    x: np.ndarray
    y: np.ndarray
    evidence: list[Evidence]

    def __len__(self) -> int:
        return len(self.evidence)


def test_set(examples: Sequence[Example]) -> TestSet:
    b = stack(examples)
    return TestSet(b.x, b.y, [evidence_of(ex) for ex in examples])


test_set.__test__ = False
TestSet.__test__ = False


def noisy(ts: TestSet, k: int, seed: int, head: int = 0) -> list[Evidence]:
    """Evidence with ``k`` extra tags per instance (capped at the absent count)."""
    if k == 0:
        return list(ts.evidence)
    out = []
    for i, e in enumerate(ts.evidence):
        vec = dict(e.targets)[head]
        kk = min(k, int(np.sum(vec == 0.0)))
        out.append(add_noisy_tags(e, kk, seed=seed + i, head=head))
    return out


def run_variants(
    cfg: RunConfig,
    nets: dict[str, MtlNetwork],
    snap: WeightSnapshot,
    ts: TestSet,
    evidence: Sequence[Evidence] | None = None,
    workers: int = 1,
    **changes,
) -> list[bl.VariantResult]:
    ecfg = cfg.eval_config(**changes)
    return bl.evaluate_variants(nets, snap, ts.x, ts.y, evidence or ts.evidence, ecfg, workers)


SWEEP_COLUMNS = ("sweep", "T", "alpha", "lr", "k", *bl.METRIC_COLUMNS, "weight_deviation")


def _sweep_row(sweep: str, point: dict, r: bl.VariantResult) -> dict:
    row = {"sweep": sweep, "T": "", "alpha": "", "lr": "", "k": "", **point, "variant": r.variant}
    row.update({k: repr(v) for k, v in r.metrics.as_row().items()})
    row["weight_deviation"] = repr(r.mean_deviation)
    return row


def run_sweeps(cfg: RunConfig, nets, snap, ts: TestSet, workers: int = 1) -> list[dict]:
    rows: list[dict] = []
    es, l2 = cfg.es_config(), cfg.l2_config()
    bp = [v for v in cfg.variants if v.startswith("BP-")]
    l2_variants = tuple(v for v in bp if v.startswith(bl.BP_L2))
    for T in cfg.sweeps.get("T", []):
        if not bp:
            break
        res = run_variants(
            cfg, nets, snap, ts, workers=workers, variants=tuple(bp),
            es=AdaptConfig(**{**asdict(es), "iterations": int(T)}),
            l2=AdaptConfig(**{**asdict(l2), "iterations": int(T)}),
        )
        rows += [_sweep_row("T", {"T": int(T)}, r) for r in res]
    for a in cfg.sweeps.get("alpha", []):
        if not l2_variants:
            break
        res = run_variants(
            cfg, nets, snap, ts, workers=workers, variants=l2_variants,
            l2=AdaptConfig(**{**asdict(l2), "alpha": float(a)}),
        )
        rows += [_sweep_row("alpha", {"alpha": float(a)}, r) for r in res]
    with_evidence = tuple(v for v in cfg.variants if v in bl.EVIDENCE_VARIANTS)
    for k in cfg.sweeps.get("noise_k", []):
        if not with_evidence:
            break
        ev = noisy(ts, int(k), cfg.noise_seed)
        res = run_variants(cfg, nets, snap, ts, ev, workers=workers, variants=with_evidence)
        rows += [_sweep_row("noise", {"k": int(k)}, r) for r in res]
    return rows


SENSITIVITY_COLUMNS = ("T", "alpha", "lr", "regularizer", "accuracy", "mIoU", "weight_deviation")


def run_sensitivity(cfg: RunConfig, mtl: MtlNetwork, snap: WeightSnapshot, ts: TestSet, workers: int = 1) -> list[dict]:
    """BP-L2 over the (T, alpha, lr) grid; alpha = 0 is plain early stopping."""
    base = cfg.l2_config()
    lrs = cfg.sensitivity.get("lr") or [base.lr]
    rows = []
    for T in cfg.sensitivity["T"]:
        for a in cfg.sensitivity["alpha"]:
            for lr in lrs:
                acfg = AdaptConfig(**{**asdict(base), "iterations": int(T), "alpha": float(a), "lr": float(lr)})
                (r,) = run_variants(cfg, {bl.MTL: mtl}, snap, ts, workers=workers, variants=(bl.BP_L2,), l2=acfg)
                rows.append(
                    {
                        "T": int(T),
                        "alpha": repr(float(a)),
                        "lr": repr(float(lr)),
                        "regularizer": acfg.regularizer,
                        "accuracy": repr(r.metrics.accuracy),
                        "mIoU": repr(r.metrics.miou),
                        "weight_deviation": repr(r.mean_deviation),
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# output helpers


def write_digest(path: Path, cfg: RunConfig) -> None:
    body = Path(path).read_bytes()
    Path(f"{path}.digest").write_text(
        f"config_sha256={cfg.digest()}\nfile_sha256={hashlib.sha256(body).hexdigest()}\n"
    )


def write_rows(path: Path, columns: Sequence[str], rows: Sequence[dict], cfg: RunConfig) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="raise")
        w.writeheader()
        w.writerows(rows)
    write_digest(path, cfg)


def _load_nets(cfg: RunConfig, out: Path) -> tuple[dict[str, MtlNetwork], WeightSnapshot]:
    path = out / "snapshot.evbp"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `evbp train` first")
    snap = load_snapshot(path)
    if snap.topology != cfg.topology():
        raise IntegrityError(f"snapshot topology {snap.topology} does not match config {cfg.topology()}")
    nets = {bl.MTL: network_from_snapshot(snap)}
    if bl.PRIMARY_ONLY in cfg.variants:
        solo = load_snapshot(out / "snapshot_primary.evbp")
        if solo.topology != cfg.topology(with_aux=False):
            raise IntegrityError("primary-only snapshot topology does not match config")
        nets[bl.PRIMARY_ONLY] = network_from_snapshot(solo)
    return nets, snap


# ---------------------------------------------------------------------------
# verbs


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    train_set, _ = generate(cfg)
    t0 = time.perf_counter()
    mtl, solo = train_networks(cfg, train_set)
    save_snapshot(mtl.snapshot, out / "snapshot.evbp")
    write_history_csv(mtl.history, out / "history.csv", cfg.topology().n_aux)
    write_digest(out / "history.csv", cfg)
    if solo is not None:
        save_snapshot(solo.snapshot, out / "snapshot_primary.evbp")
        write_history_csv(solo.history, out / "history_primary.csv", 0)
        write_digest(out / "history_primary.csv", cfg)
    last = mtl.history[-1] if mtl.history else None
    if last is None:
        print("epochs=0: snapshot holds the initial weights")
    else:
        aux = " ".join(f"aux{h}={v:.4f}" for h, v in enumerate(last.aux_loss))
        print(f"epoch {last.epoch}: total={last.total_loss:.4f} primary={last.primary_loss:.4f} {aux}")
    print(f"trained in {time.perf_counter() - t0:.1f}s; checksum {mtl.snapshot.checksum()[:16]}")
    return {"checksum": mtl.snapshot.checksum()}


def cmd_eval(cfg: RunConfig, out: Path, workers: int = 1) -> list[bl.VariantResult]:
    nets, snap = _load_nets(cfg, out)
    ts = test_set(generate(cfg)[1])
    results = run_variants(cfg, nets, snap, ts, workers=workers)
    bl.write_metrics_csv(results, out / "metrics.csv")
    write_digest(out / "metrics.csv", cfg)
    for r in results:
        if r.variant in (bl.BP_ES, bl.BP_L2):
            path = out / f"traces_{r.variant.lower().replace('-', '_')}.csv"
            write_traces_csv(enumerate(r.traces), path)
            write_digest(path, cfg)
    rows = run_sweeps(cfg, nets, snap, ts, workers)
    write_rows(out / "sweeps.csv", SWEEP_COLUMNS, rows, cfg)
    for r in results:
        m = r.metrics
        print(f"{r.variant:<14} acc={m.accuracy:.4f} mIoU={m.miou:.4f} f1={m.f1:.4f}")
    return results


def cmd_sensitivity(cfg: RunConfig, out: Path, workers: int = 1) -> list[dict]:
    nets, snap = _load_nets(cfg, out)
    ts = test_set(generate(cfg)[1])
    rows = run_sensitivity(cfg, nets[bl.MTL], snap, ts, workers)
    write_rows(out / "sensitivity.csv", SENSITIVITY_COLUMNS, rows, cfg)
    for r in rows:
        print(f"T={r['T']:<3} alpha={float(r['alpha']):<8g} lr={float(r['lr']):<8g} mIoU={float(r['mIoU']):.4f}")
    return rows


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    train_set, test = generate(cfg)
    for name, data in (("train.tsv", train_set), ("test.tsv", test)):
        write_dataset(data, out / name)
        write_digest(out / name, cfg)
    print(f"wrote {len(train_set)} train / {len(test)} test examples to {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evbp", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("train", "eval", "sensitivity", "gen-data"):
        s = sub.add_parser(verb)
        s.add_argument("--config", type=Path, default=None, help="YAML run config (defaults: grid_seg)")
        s.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the config's global seed")
        s.add_argument("--workers", type=int, default=1, help="processes for per-instance adaptation")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True))
    try:
        if args.verb == "train":
            cmd_train(cfg, args.out)
        elif args.verb == "eval":
            cmd_eval(cfg, args.out, args.workers)
        elif args.verb == "sensitivity":
            cmd_sensitivity(cfg, args.out, args.workers)
        else:
            cmd_gen_data(cfg, args.out)
    except (IntegrityError, FileNotFoundError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, AdaptationError, DomainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
