"""One old-to-new upgrade on synthetic data, shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

from .config import ExperimentConfig
from .data import QueryGalleryBench, generate_synthetic, make_bench, make_split
from .engine import SequenceResult, TrainRun, sequential_upgrade, train
from .evaluation import EvalReport, evaluate_upgrade

# new-generation models draw their initial weights from a seed offset from the old model's
NEW_SEED_OFFSET = 100


@dataclass
class UpgradeResult:
    bench: QueryGalleryBench
    runs: dict[str, TrainRun]
    reports: dict[str, EvalReport]


def build_data(cfg: ExperimentConfig):
    d = cfg.dataset
    ds = generate_synthetic(d.class_count, d.per_class, d.input_dim, d.spread, d.noise_fraction,
                            d.seed)
    bench_ds = generate_synthetic(d.class_count, cfg.bench.per_class, d.input_dim, d.spread,
                                  d.noise_fraction, d.seed, sample_seed=cfg.bench.sample_seed)
    return ds, make_bench(bench_ds, cfg.bench.query_per_class, cfg.run.seed)


def single_upgrade(cfg: ExperimentConfig, methods=("bct", "dmu")) -> UpgradeResult:
    """Train old on the old split, then oracle and each compatible method on the new split."""
    ds, bench = build_data(cfg)
    sp = make_split(ds, cfg.split.kind, cfg.split.fraction, cfg.run.seed)
    seed = cfg.run.seed
    runs = {"old": train(sp.old_set, cfg.train_config("old", seed), None, 0)}
    runs["oracle"] = train(sp.new_set, cfg.train_config("oracle", seed + NEW_SEED_OFFSET), None, 1)
    for method in methods:
        runs[method] = train(sp.new_set, cfg.train_config(method, seed + NEW_SEED_OFFSET),
                             runs["old"], 1)
    reports = {}
    old = runs["old"]
    for method in methods:
        run = runs[method]
        reports[method] = evaluate_upgrade(
            bench, run.encoder, old_encoder=old.encoder, adapter=run.adapter,
            oracle_encoder=runs["oracle"].encoder, old_classifier=old.classifier,
            new_classifier=run.classifier, metric=cfg.bench.metric, k=cfg.bench.k,
            far=cfg.bench.far,
            scatter_count=cfg.bench.scatter_count if run.adapter is not None else 0, seed=seed)
    return UpgradeResult(bench, runs, reports)


def sequence(cfg: ExperimentConfig) -> SequenceResult:
    ds, bench = build_data(cfg)
    return sequential_upgrade(ds, bench, cfg.sequence.fractions, cfg.sequence.methods,
                              cfg.train_config("old"), cfg.bench.metric, cfg.bench.k, cfg.bench.far)


SUMMARY_COLUMNS = ("method", "generation", "m_self", "m_cross", "delta_up", "delta_down",
                   "m_cross_prev", "m_adapted", "m_oracle_self", "m_old_self", "gallery_version")


def summary_table(res: SequenceResult) -> str:
    """Tab-separated, one row per (method, generation): self, cross, gain, degradation first."""
    rows = ["\t".join(SUMMARY_COLUMNS)]
    for reps in res.reports.values():
        for rep in reps:
            recs = dict(rep.records())
            rows.append("\t".join(recs.get(c, "") for c in SUMMARY_COLUMNS))
    return "\n".join(rows) + "\n"
