"""Experiment plumbing behind the ``mdal`` command: configs, datasets, runs, tables.

Layout under ``out_dir``::

    checkpoints/{meta,base}_r{replicate}.mdal      (+ .curve.csv)
    adapt/{strategy}_K{K}_r{replicate}/<domain>/    predictions, traces, report
    compare/                                       compare.csv, compare.txt, compare_replicates.csv
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from collections.abc import Sequence
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import metatrain as mt
from . import online
from . import synthvid as sv
from .checkpoint import MetaLearnerState, load_checkpoint
from .errors import ConfigurationError, InputError, LoadError, MDALError
from .metrics import EvalReport, evaluate_run, write_trace_csv
from .online import AdaptConfig
from .synthvid import DomainSpec, Video

log = logging.getLogger(__name__)

KIND_OF = {"none": "base", "ft": "base", "meta": "meta", "meta_online_naive": "meta", "mdal": "meta"}


class HarnessError(MDALError):
    """A command cannot proceed (existing outputs, missing inputs)."""


def schema() -> dict[str, Any]:
    text = resources.files("mdal").joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


def reference_config_dict() -> dict[str, Any]:
    return json.loads(resources.files("mdal").joinpath("configs/reference.json").read_text())


@dataclass(frozen=True)
class DomainEntry:
    spec: DomainSpec
    num_videos: int
    seed_offset: int

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DomainEntry":
        base = sv.REFERENCE_SPECS[d["spec"]].to_dict()
        base.update(d.get("overrides", {}))
        return cls(DomainSpec.from_dict(base), int(d.get("num_videos", 4)), int(d.get("seed_offset", 0)))


@dataclass(frozen=True)
class RunConfig:
    source: DomainEntry
    targets: tuple[DomainEntry, ...]
    meta: mt.MetaConfig = mt.MetaConfig()
    adapt: AdaptConfig = AdaptConfig()
    seed: int = 0
    replicates: int = 5
    data_root: Path = Path("data")
    out_dir: Path = Path("runs")
    strategies: tuple[str, ...] = online.STRATEGIES
    K: tuple[int, ...] = (0, 1, 3, 5, 7, 10)
    timing_reference: tuple[str, int] | None = ("ft", 100)
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        try:
            jsonschema.validate(d, schema())
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigurationError(f"config invalid at {where}: {e.message}") from None
        cmp = d.get("compare", {})
        tr = cmp.get("timing_reference", {"strategy": "ft", "K": 100})
        cfg = cls(
            source=DomainEntry.from_dict(d["source"]),
            targets=tuple(DomainEntry.from_dict(t) for t in d["targets"]),
            meta=mt.MetaConfig.from_dict({**d.get("meta", {}), "seed": int(d.get("seed", 0))}),
            adapt=AdaptConfig.from_dict({**d.get("adapt", {}), "seed": int(d.get("seed", 0))}),
            seed=int(d.get("seed", 0)),
            replicates=int(d.get("replicates", 5)),
            data_root=Path(d.get("data_root", "data")),
            out_dir=Path(d.get("out_dir", "runs")),
            strategies=tuple(cmp.get("strategies", online.STRATEGIES)),
            K=tuple(cmp.get("K", (0, 1, 3, 5, 7, 10))),
            timing_reference=(tr["strategy"], int(tr["K"])),
            raw=d,
        )
        names = [cfg.source.spec.name] + [t.spec.name for t in cfg.targets]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"domain names must be distinct, got {names}")
        return cfg

    @classmethod
    def load(cls, path: Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict(reference_config_dict())
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON: {e}") from e
        return cls.from_dict(d)

    def with_overrides(self, seed: int | None = None, replicates: int | None = None,
                       data_root: Path | None = None, out_dir: Path | None = None) -> "RunConfig":
        kw: dict[str, Any] = {}
        if seed is not None:
            kw.update(seed=seed, meta=dataclasses.replace(self.meta, seed=seed),
                      adapt=self.adapt.with_(seed=seed))
        if replicates is not None:
            if replicates < 1:
                raise ConfigurationError("--replicates must be >= 1")
            kw["replicates"] = replicates
        if data_root is not None:
            kw["data_root"] = Path(data_root)
        if out_dir is not None:
            kw["out_dir"] = Path(out_dir)
        return dataclasses.replace(self, **kw)

    # replicate r trains and adapts with seed + r; the datasets stay fixed
    def meta_config(self, replicate: int) -> mt.MetaConfig:
        return dataclasses.replace(self.meta, seed=self.seed + replicate)

    def adapt_config(self, replicate: int, **kw: Any) -> AdaptConfig:
        return self.adapt.with_(seed=self.seed + replicate, **kw)

    def checkpoint_path(self, kind: str, replicate: int) -> Path:
        return self.out_dir / "checkpoints" / f"{kind}_r{replicate}.mdal"

    def domain_dir(self, entry: DomainEntry) -> Path:
        return self.data_root / entry.spec.name

    def fingerprint_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "meta": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.meta).items()},
            "adapt": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.adapt).items()},
            "targets": [t.spec.digest() for t in self.targets],
        }


# --- gen -------------------------------------------------------------------------

def gen(cfg: RunConfig, force: bool = False) -> list[dict[str, Any]]:
    entries = [cfg.source, *cfg.targets]
    existing = [cfg.domain_dir(e) for e in entries if cfg.domain_dir(e).exists()]
    if existing and not force:
        raise HarnessError(f"refusing to overwrite {', '.join(map(str, existing))} (use --force)")
    summary = []
    for e in entries:
        d = cfg.domain_dir(e)
        if d.exists():
            shutil.rmtree(d)
        sv.generate_dataset(e.spec, cfg.seed + e.seed_offset, e.num_videos, cfg.data_root)
        summary.append({"domain": e.spec.name, "videos": e.num_videos, "seed": cfg.seed + e.seed_offset,
                        "frames": e.spec.length, "size": f"{e.spec.height}x{e.spec.width}",
                        "path": str(d)})
    return summary


def load_source(cfg: RunConfig) -> list[Video]:
    d = cfg.domain_dir(cfg.source)
    if not d.exists():
        raise HarnessError(f"source dataset {d} not found (run `mdal gen` first)")
    return sv.load_domain(d, "source")


def load_targets(cfg: RunConfig, names: Sequence[str] | None = None) -> dict[str, list[Video]]:
    out = {}
    for e in cfg.targets:
        if names and e.spec.name not in names:
            continue
        d = cfg.domain_dir(e)
        if not d.exists():
            raise HarnessError(f"target dataset {d} not found (run `mdal gen` first)")
        out[e.spec.name] = sv.load_domain(d, "target")
    if names and set(names) - set(out):
        raise ConfigurationError(f"unknown target domains {sorted(set(names) - set(out))}")
    return out


# --- meta-train ------------------------------------------------------------------

def _trim_curve(path: Path, upto: int) -> None:
    """Drop curve rows past the checkpointed iteration so a resumed run appends cleanly."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= upto]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def train(cfg: RunConfig, mode: str = "meta", replicates: Sequence[int] | None = None,
          resume: bool = False, force: bool = False, stop_at: int | None = None) -> list[Path]:
    if mode not in ("meta", "base"):
        raise ConfigurationError(f"mode must be 'meta' or 'base', got {mode!r}")
    videos = load_source(cfg)
    reps = list(range(cfg.replicates)) if replicates is None else list(replicates)
    written = []
    for r in reps:
        mcfg = cfg.meta_config(r)
        ckpt = cfg.checkpoint_path(mode, r)
        curve = ckpt.with_suffix(".curve.csv")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        state = None
        if ckpt.exists():
            if resume:
                state = load_checkpoint(ckpt, expect_arch=mcfg.arch)
                if state.flags.get("kind") != mode:
                    raise LoadError(f"{ckpt}: holds a {state.flags.get('kind')!r} run, not {mode!r}")
                _trim_curve(curve, state.iteration)
                log.info("resuming %s at iteration %d", ckpt, state.iteration)
            elif not force:
                raise HarnessError(f"{ckpt} exists (use --resume to continue or --force to restart)")
        run = mt.meta_train if mode == "meta" else mt.base_train
        run(videos, mcfg, state=state, checkpoint_path=ckpt, curve_path=curve, stop_at=stop_at)
        written.append(ckpt)
    return written


def load_for(cfg: RunConfig, strategy: str, replicate: int, path: Path | None = None) -> MetaLearnerState:
    kind = KIND_OF[strategy]
    path = Path(path) if path is not None else cfg.checkpoint_path(kind, replicate)
    if not path.exists():
        raise HarnessError(f"checkpoint {path} not found (run `mdal meta-train --mode {kind}` first)")
    return load_checkpoint(path, expect_arch=cfg.meta.arch)


# --- adapt / eval ----------------------------------------------------------------

@dataclass
class DomainRun:
    domain: str
    videos: list[Video]
    predictions: list[list[np.ndarray]]
    traces: list[online.AdaptTrace]

    def names(self) -> list[str]:
        return [f"video_{k:04d}" for k in range(len(self.videos))]

    def report(self, config: dict[str, Any] | None = None) -> EvalReport | None:
        if not all(v.fully_labeled for v in self.videos):
            return None
        names = self.names()
        return evaluate_run(
            dict(zip(names, self.predictions)),
            {n: list(v.masks[1:]) for n, v in zip(names, self.videos)},
            {n: tr.rows() for n, tr in zip(names, self.traces)},
            config,
        )

    @property
    def first_frame_seconds(self) -> float:
        return float(np.mean([t.first_frame_seconds for t in self.traces]))


def run_strategy(state: MetaLearnerState, targets: dict[str, list[Video]], acfg: AdaptConfig) -> list[DomainRun]:
    out = []
    for name, videos in targets.items():
        res = online.adapt_dataset(state, videos, acfg)
        out.append(DomainRun(name, videos, [p for p, _ in res], [t for _, t in res]))
    return out


def pooled_scores(runs: Sequence[DomainRun]) -> tuple[float, float]:
    """Mean IoU and Dice over all target videos (each video weighted equally)."""
    reports = [r.report() for r in runs]
    vids = [v for rep in reports if rep is not None for v in rep.videos]
    if not vids:
        return float("nan"), float("nan")
    return float(np.mean([v.mean_iou for v in vids])), float(np.mean([v.mean_dice for v in vids]))


def _check_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise HarnessError(f"{path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def adapt(cfg: RunConfig, strategy: str | None = None, K: int | None = None, replicate: int = 0,
          checkpoint: Path | None = None, out: Path | None = None, domains: Sequence[str] | None = None,
          force: bool = False) -> dict[str, Any]:
    kw: dict[str, Any] = {}
    if strategy is not None:
        kw["strategy"] = strategy
    if K is not None:
        kw["K"] = K
    acfg = cfg.adapt_config(replicate, **kw)
    acfg.validate()
    out = Path(out) if out is not None else cfg.out_dir / "adapt" / f"{acfg.strategy}_K{acfg.K}_r{replicate}"
    state = load_for(cfg, acfg.strategy, replicate, checkpoint)
    targets = load_targets(cfg, domains)
    _check_out(out, force)
    fp = cfg.fingerprint_dict() | {"adapt": dataclasses.asdict(acfg) | {"augment": list(acfg.augment)}}
    summary: dict[str, Any] = {"strategy": acfg.strategy, "K": acfg.K, "replicate": replicate, "domains": {}}
    runs = run_strategy(state, targets, acfg)
    for run in runs:
        ddir = out / run.domain
        for name, preds in zip(run.names(), run.predictions):
            vdir = ddir / name
            vdir.mkdir(parents=True, exist_ok=True)
            for i, p in enumerate(preds, start=2):
                sv.write_pgm(vdir / f"pred_{i:06d}.pgm", p > 0.5)
        rep = run.report(fp)
        if rep is not None:
            rep.write(ddir)
            summary["domains"][run.domain] = {"mean_iou": rep.mean_iou, "mean_dice": rep.mean_dice,
                                              "accepted": [t.accepted for t in run.traces]}
        else:
            for name, tr in zip(run.names(), run.traces):
                write_trace_csv(ddir / f"trace_{name}.csv", tr.rows())
            summary["domains"][run.domain] = {"accepted": [t.accepted for t in run.traces]}
        log.info("%s %s K=%d: first-frame adaptation %.3fs per video",
                 run.domain, acfg.strategy, acfg.K, run.first_frame_seconds)
    iou_all, dice_all = pooled_scores(runs)
    summary["mean_iou"], summary["mean_dice"] = iou_all, dice_all
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def evaluate_predictions(cfg: RunConfig, pred_dir: Path, out: Path | None = None) -> dict[str, EvalReport]:
    """Score stored ``pred_*.pgm`` masks against the ground truth of each target domain."""
    pred_dir = Path(pred_dir)
    reports = {}
    for e in cfg.targets:
        pdir = pred_dir / e.spec.name
        if not pdir.is_dir():
            continue
        videos = sv.load_domain(cfg.domain_dir(e), "target")
        names = [f"video_{k:04d}" for k in range(len(videos))]
        preds, gts = {}, {}
        for n, v in zip(names, videos):
            if not v.fully_labeled:
                raise InputError(f"{e.spec.name}/{n}: ground truth for frames 2..T is missing")
            files = sorted((pdir / n).glob("pred_*.pgm"))
            preds[n] = [sv.read_pgm(f) for f in files]
            gts[n] = list(v.masks[1:])
        rep = evaluate_run(preds, gts, config={"predictions": str(pdir)})
        rep.write(Path(out) / e.spec.name if out else pdir / "eval")
        reports[e.spec.name] = rep
    if not reports:
        raise InputError(f"{pred_dir}: no prediction directories for the configured target domains")
    return reports


# --- compare ---------------------------------------------------------------------

@dataclass
class CompareRow:
    strategy: str
    K: int
    replicate: int
    domain: str  # "all" pools every target video
    iou: float
    dice: float
    first_frame_seconds: float
    accepted: int


def grid(strategies: Sequence[str], Ks: Sequence[int]) -> list[tuple[str, int]]:
    """Strategy x K grid; ``none`` ignores K so it appears once."""
    cells = []
    for s in strategies:
        if s not in online.STRATEGIES:
            raise ConfigurationError(f"unknown strategy {s!r}")
        for k in ([0] if s == "none" else Ks):
            if (s, k) not in cells:
                cells.append((s, k))
    return cells


def compare(cfg: RunConfig, strategies: Sequence[str] | None = None, Ks: Sequence[int] | None = None,
            replicates: Sequence[int] | None = None, out: Path | None = None,
            timing_reference: bool = True, force: bool = False,
            cells: Sequence[tuple[str, int]] | None = None) -> list[CompareRow]:
    """Run every (strategy, K) cell for every replicate and write the tables.

    ``cells`` replaces the strategies x K product with an explicit list.
    """
    if cells is None:
        cells = grid(strategies or cfg.strategies, Ks if Ks is not None else cfg.K)
    else:
        cells = list(dict.fromkeys((s, int(k)) for s, k in cells))
        grid([s for s, _ in cells], [0])  # validates the names
    if timing_reference and cfg.timing_reference and cfg.timing_reference not in cells:
        cells.append(cfg.timing_reference)
    reps = list(range(cfg.replicates)) if replicates is None else list(replicates)
    targets = load_targets(cfg)
    out = Path(out) if out is not None else cfg.out_dir / "compare"
    _check_out(out, force)
    rows: list[CompareRow] = []
    for r in reps:
        kinds = {KIND_OF[s] for s, _ in cells}
        states = {kind: load_for(cfg, "meta" if kind == "meta" else "none", r) for kind in kinds}
        for s, k in cells:
            runs = run_strategy(states[KIND_OF[s]], targets, cfg.adapt_config(r, strategy=s, K=k))
            for run in runs:
                i, d = pooled_scores([run])
                rows.append(CompareRow(s, k, r, run.domain, i, d, run.first_frame_seconds,
                                       sum(t.accepted for t in run.traces)))
            i, d = pooled_scores(runs)
            ff = float(np.mean([t.first_frame_seconds for run in runs for t in run.traces]))
            rows.append(CompareRow(s, k, r, "all", i, d, ff,
                                   sum(t.accepted for run in runs for t in run.traces)))
            log.info("replicate %d %-18s K=%-3d IoU %.4f Dice %.4f", r, s, k, i, d)
    write_compare(rows, out)
    return rows


def summarize(rows: Sequence[CompareRow], domain: str = "all") -> list[dict[str, Any]]:
    """Replicate means per (strategy, K) in first-seen order."""
    keys: list[tuple[str, int]] = []
    for r in rows:
        if (r.strategy, r.K) not in keys:
            keys.append((r.strategy, r.K))
    table = []
    for s, k in keys:
        sel = [r for r in rows if r.strategy == s and r.K == k and r.domain == domain]
        if not sel:
            continue
        ious = [r.iou for r in sel]
        table.append({
            "strategy": s, "K": k, "replicates": len(sel),
            "iou_mean": float(np.mean(ious)), "iou_std": float(np.std(ious)),
            "dice_mean": float(np.mean([r.dice for r in sel])),
            "first_frame_seconds": float(np.mean([r.first_frame_seconds for r in sel])),
            "iou_per_replicate": ious,
        })
    return table


def lookup(table: Sequence[dict[str, Any]], strategy: str, K: int) -> dict[str, Any]:
    for row in table:
        if row["strategy"] == strategy and row["K"] == K:
            return row
    raise KeyError((strategy, K))


def write_compare(rows: Sequence[CompareRow], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare_replicates.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["strategy", "K", "replicate", "domain", "iou", "dice", "first_frame_seconds", "accepted"])
        for r in rows:
            wr.writerow([r.strategy, r.K, r.replicate, r.domain, f"{r.iou:.6f}", f"{r.dice:.6f}",
                         f"{r.first_frame_seconds:.6f}", r.accepted])
    domains = [d for d in dict.fromkeys(r.domain for r in rows) if d != "all"]
    table = summarize(rows)
    per_domain = {d: {(t["strategy"], t["K"]): t["iou_mean"] for t in summarize(rows, d)} for d in domains}
    header = ["strategy", "K", "iou", "iou_std", "dice", *[f"iou_{d}" for d in domains], "ff_seconds"]
    body = []
    for t in table:
        key = (t["strategy"], t["K"])
        body.append([t["strategy"], str(t["K"]), f"{t['iou_mean']:.4f}", f"{t['iou_std']:.4f}",
                     f"{t['dice_mean']:.4f}", *[f"{per_domain[d][key]:.4f}" for d in domains],
                     f"{t['first_frame_seconds']:.4f}"])
    with open(out / "compare.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(body)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i < 2 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
