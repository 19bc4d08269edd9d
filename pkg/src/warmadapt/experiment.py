"""End-to-end experiment runner.

One experiment = for every seed: generate a synthetic language family on
the tree, pretrain a backbone on the designated pool, pick source
languages (tree-guided or random), then run each requested method and
evaluate per-target test CER. Methods:

* ``ia_mtl``     — joint multi-task warm-up, then per-target fine-tuning;
* ``ia_fomaml``  — first-order meta warm-up, then per-target fine-tuning;
* ``peft``       — per-target fine-tuning of adapters + downstream, cold;
* ``freeze_ft``  — per-target fine-tuning of a fresh downstream, cold, no adapters;
* ``full_ft``    — per-target fine-tuning of everything incl. the backbone;
* ``st_mtl``     — one joint multilingual model over sources+targets, no
  per-target fine-tuning.

Everything an output directory contains is reproducible byte-for-byte
from (config, seeds) except the training logs, whose wall-clock column is
honest rather than deterministic.
"""

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adaptation, synthdata
from .adaptation import AdaptationConfig
from .langtree import LanguageTree
from .model import Model
from .seeding import derive_seed

SCHEMA_VERSION = 1

ALL_METHODS = ("ia_mtl", "ia_fomaml", "peft", "freeze_ft", "full_ft", "st_mtl")

RESULT_FIELDS = ["seed", "method", "target", "split", "n_utts", "edits", "ref_len", "cer"]
SUMMARY_FIELDS = ["method", "target", "seed", "cer"]
SELECTION_FIELDS = ["seed", "selection", "m", "sources"]


class ExperimentError(RuntimeError):
    """A stage failed; the message names the stage and seed."""


@dataclass(frozen=True)
class ExperimentConfig:
    tree: str
    targets: tuple
    seeds: tuple = (0, 1, 2, 3, 4)
    profile: str = "ten_min"
    pretrain_pool: tuple = ()
    sources: tuple | None = None  # explicit list, or None to auto-select
    m: int = 10
    selection: str = "tree"  # 'tree' (similarity ranking) or 'random'
    candidates: tuple | str = "all"  # 'all' = every leaf except targets and pool
    methods: tuple = ALL_METHODS
    name: str = "experiment"
    out: str | None = None  # default output directory; CLI flag overrides
    schema_version: int = SCHEMA_VERSION
    gen: dict = field(default_factory=dict)  # synthdata.GenConfig overrides
    length: dict = field(default_factory=dict)  # synthdata.LengthConfig overrides
    pretrain: dict = field(default_factory=dict)  # AdaptationConfig overrides
    ia: dict = field(default_factory=dict)
    ia_fomaml: dict = field(default_factory=dict)  # extra overrides on top of `ia`
    ft: dict = field(default_factory=dict)
    save_checkpoints: bool = True

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "pretrain_pool", tuple(self.pretrain_pool))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.sources is not None:
            object.__setattr__(self, "sources", tuple(self.sources))
        if isinstance(self.candidates, (list, tuple)):
            object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {self.schema_version}")
        if not self.seeds:
            raise ValueError("seeds list must be non-empty")
        if not self.targets:
            raise ValueError("targets list must be non-empty")
        if self.selection not in ("tree", "random"):
            raise ValueError("selection must be 'tree' or 'random'")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.profile not in synthdata.PROFILES:
            raise ValueError(f"profile must be one of {sorted(synthdata.PROFILES)}")

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**doc)
        if not os.path.isabs(cfg.tree):
            # tree files travel with their config
            cfg = replace(cfg, tree=os.path.join(os.path.dirname(os.path.abspath(path)), cfg.tree))
        return cfg

    def resolved(self):
        """Every field materialized, including phase-config defaults."""
        doc = asdict(self)
        doc["gen"] = asdict(synthdata.GenConfig(**self.gen))
        doc["length"] = asdict(synthdata.LengthConfig(**self.length))
        for key in ("pretrain", "ia", "ft"):
            doc[key] = asdict(AdaptationConfig(**{**getattr(self, key), "seed": 0}))
            doc[key].pop("seed")  # derived per run, not configurable here
        merged = {**self.ia, **self.ia_fomaml}
        doc["ia_fomaml"] = asdict(AdaptationConfig(**{**merged, "seed": 0}))
        doc["ia_fomaml"].pop("seed")
        return doc


def _select_sources(cfg, tree, seed):
    if cfg.sources is not None:
        return list(cfg.sources), "explicit"
    if cfg.candidates == "all":
        pool = [c for c in tree.leaf_codes() if c not in cfg.targets and c not in cfg.pretrain_pool]
    else:
        pool = [c for c in cfg.candidates if c not in cfg.targets]
    if cfg.selection == "tree":
        return tree.select_sources(cfg.targets, pool, cfg.m), "tree"
    rng = np.random.default_rng(derive_seed(seed, "select"))
    picks = rng.choice(len(pool), size=cfg.m, replace=False)
    return [pool[i] for i in sorted(picks)], "random"


def _phase_cfg(overrides, algorithm, seed):
    return AdaptationConfig(**{**overrides, "algorithm": algorithm, "seed": seed})


class _SeedRun:
    """All per-seed state and the method dispatch."""

    def __init__(self, cfg, tree, seed, out):
        self.cfg = cfg
        self.tree = tree
        self.seed = seed
        self.out = out
        self.logs = []  # (name, rows)
        self.results = []  # result-csv row dicts
        self.stage = "setup"
        gen_cfg = synthdata.GenConfig(**cfg.gen)
        length_cfg = synthdata.LengthConfig(**cfg.length)
        specs = synthdata.generate_family(tree, derive_seed(seed, "family"), gen_cfg)
        missing = [c for c in list(cfg.targets) + list(cfg.pretrain_pool) if c not in specs]
        if missing:
            raise ValueError(f"codes not in tree: {missing}")
        self.data = synthdata.make_dataset(specs, cfg.profile, derive_seed(seed, "data"), length_cfg)
        self.sources, self.selection_kind = _select_sources(cfg, tree, seed)

        self.stage = "pretrain"
        if cfg.pretrain_pool:
            pre_cfg = _phase_cfg(cfg.pretrain, "mtl", derive_seed(seed, "pretrain"))
            self.backbone, rows = adaptation.pretrain_backbone(self.data, list(cfg.pretrain_pool), pre_cfg)
            self.logs.append(("pretrain", rows))
        else:
            self.backbone = None

    def _base_model(self, *tag, with_adapters=True, backbone_frozen=True):
        m = Model.build(
            seed=derive_seed(self.seed, "init", *tag),
            with_adapters=with_adapters,
            backbone_frozen=backbone_frozen,
        )
        if self.backbone is not None:
            m.params.update({k: v.copy() for k, v in self.backbone.items()})
        return m

    def _record(self, method, report):
        self.results.append(
            {
                "seed": self.seed,
                "method": method,
                "target": report.language,
                "split": report.split,
                "n_utts": report.n_utts,
                "edits": report.edits,
                "ref_len": report.ref_len,
                "cer": report.cer,
            }
        )

    def _save_ckpt(self, model, name):
        if not self.cfg.save_checkpoints:
            return
        ckpt_dir = os.path.join(self.out, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        model.save(os.path.join(ckpt_dir, f"seed{self.seed}.{name}.npz"), phase=model.phase)

    def _finetune_all(self, method, start_model_fn, mode):
        for target in self.cfg.targets:
            ft_cfg = _phase_cfg(self.cfg.ft, "mtl", derive_seed(self.seed, "ft", method, target))
            model, report, rows = adaptation.finetune_target(
                start_model_fn(target), self.data, target, mode, ft_cfg
            )
            self.logs.append((f"{method}.{target}", rows))
            self._record(method, report)

    def run_method(self, method):
        self.stage = method
        cfg, seed = self.cfg, self.seed
        if method in ("ia_mtl", "ia_fomaml"):
            algo = "mtl" if method == "ia_mtl" else "fomaml"
            overrides = cfg.ia if algo == "mtl" else {**cfg.ia, **cfg.ia_fomaml}
            ia_cfg = _phase_cfg(overrides, algo, derive_seed(seed, "ia", method))
            base = self._base_model(method)
            warm_fn = adaptation.ia_mtl if algo == "mtl" else adaptation.ia_fomaml
            warm, rows = warm_fn(base, self.data, self.sources, ia_cfg)
            self.logs.append((method, rows))
            self._save_ckpt(warm, f"{method}.post_ia")
            self._finetune_all(method, lambda t: warm, "peft")
        elif method == "peft":
            self._finetune_all(method, lambda t: self._base_model(method, t), "peft")
        elif method == "freeze_ft":
            self._finetune_all(
                method,
                lambda t: self._base_model(method, t, with_adapters=False),
                "freeze_ft",
            )
        elif method == "full_ft":
            self._finetune_all(
                method,
                lambda t: self._base_model(method, t, with_adapters=False, backbone_frozen=False),
                "full_ft",
            )
        elif method == "st_mtl":
            st_cfg = _phase_cfg(cfg.ia, "mtl", derive_seed(seed, "ia", method))
            base = self._base_model(method)
            model, reports, rows = adaptation.st_mtl(base, self.data, self.sources, cfg.targets, st_cfg)
            self.logs.append((method, rows))
            for report in reports:
                self._record(method, report)
        else:  # pragma: no cover - guarded by config validation
            raise ValueError(f"unknown method {method!r}")


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in fields])


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def _summarize(results):
    """Per-(method, target, seed) CER rows plus mean/std aggregate rows."""
    rows = [
        {"method": r["method"], "target": r["target"], "seed": str(r["seed"]), "cer": r["cer"]}
        for r in results
    ]
    rows.sort(key=lambda r: (r["method"], r["target"], int(r["seed"])))
    out = list(rows)
    methods = sorted({r["method"] for r in rows})
    means = {}
    for method in methods:
        for target in sorted({r["target"] for r in rows if r["method"] == method}):
            vals = [r["cer"] for r in rows if r["method"] == method and r["target"] == target]
            out.append({"method": method, "target": target, "seed": "mean", "cer": float(np.mean(vals))})
        vals = [r["cer"] for r in rows if r["method"] == method]
        mean = float(np.mean(vals))
        means[method] = mean
        out.append({"method": method, "target": "*", "seed": "mean", "cer": mean})
        out.append({"method": method, "target": "*", "seed": "std", "cer": float(np.std(vals))})
    return out, means


@dataclass
class ExperimentResult:
    out_dir: str
    mean_cer: dict  # method -> mean CER over (targets, seeds)
    results_csv: str
    summary_csv: str


def run_experiment(cfg, out_dir):
    """Execute every (seed, method) job and write the results tree:
    resolved_config.json, selections.csv, results.csv, summary.csv,
    logs/seed*/<phase>.csv, checkpoints/."""
    os.makedirs(out_dir, exist_ok=True)
    tree = LanguageTree.load(cfg.tree)
    with open(os.path.join(out_dir, "resolved_config.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.resolved(), f, indent=1, sort_keys=True)
        f.write("\n")

    all_results = []
    selection_rows = []
    for seed in cfg.seeds:
        try:
            run = _SeedRun(cfg, tree, seed, out_dir)
        except Exception as e:
            raise ExperimentError(f"stage 'setup/pretrain' failed for seed {seed}: {e}") from e
        selection_rows.append(
            {
                "seed": seed,
                "selection": run.selection_kind,
                "m": len(run.sources),
                "sources": " ".join(run.sources),
            }
        )
        for method in cfg.methods:
            try:
                run.run_method(method)
            except Exception as e:
                raise ExperimentError(f"stage {method!r} failed for seed {seed}: {e}") from e
        log_dir = os.path.join(out_dir, "logs", f"seed{seed}")
        os.makedirs(log_dir, exist_ok=True)
        for name, rows in run.logs:
            adaptation.write_training_log(os.path.join(log_dir, f"{name}.csv"), rows)
        all_results.extend(run.results)

    results_csv = os.path.join(out_dir, "results.csv")
    _write_csv(results_csv, RESULT_FIELDS, all_results)
    _write_csv(os.path.join(out_dir, "selections.csv"), SELECTION_FIELDS, selection_rows)
    summary_rows, means = _summarize(all_results)
    summary_csv = os.path.join(out_dir, "summary.csv")
    _write_csv(summary_csv, SUMMARY_FIELDS, summary_rows)
    return ExperimentResult(
        out_dir=out_dir, mean_cer=means, results_csv=results_csv, summary_csv=summary_csv
    )
