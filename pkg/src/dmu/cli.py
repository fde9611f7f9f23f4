"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure or divergence, 3 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import experiment, plotting
from .config import ExperimentConfig, add_config_flags, apply_flags, load_config
from .container import ContainerError, read_container
from .data import (QueryGalleryBench, generate_synthetic, load_dataset, make_bench, make_split,
                   save_dataset)
from .engine import DivergenceError, TrainRun, train
from .evaluation import (adapt_store, embed, evaluate_upgrade, load_store, read_records,
                         save_store)
from .models import ModelCheckpoint, load_checkpoint, save_checkpoint

log = logging.getLogger("dmu")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class OutputExists(OSError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------- helpers


def _guard(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise OutputExists(f"{path} exists; pass --force to overwrite")
    return path


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return apply_flags(cfg, args)


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _bench_dataset(cfg: ExperimentConfig):
    d = cfg.dataset
    return generate_synthetic(d.class_count, cfg.bench.per_class, d.input_dim, d.spread,
                              d.noise_fraction, d.seed, sample_seed=cfg.bench.sample_seed)


def _load_bench(path) -> QueryGalleryBench:
    meta, _ = read_container(path, "dataset")
    if "query_per_class" not in meta:
        raise ContainerError(f"{path} is a dataset, not a bench")
    return make_bench(load_dataset(path), int(meta["query_per_class"]), int(meta["bench_seed"]))


def _write_trace(path: Path, trace: list[dict]) -> None:
    keys = list(trace[0]) if trace else []
    lines = ["\t".join(keys)]
    for rec in trace:
        lines.append("\t".join(str(rec[k]) if k == "epoch" else f"{rec[k]:.10f}" for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _read_table(path: Path) -> list[dict]:
    lines = path.read_text().splitlines()
    head = lines[0].split("\t")
    rows = []
    for line in lines[1:]:
        vals = line.split("\t")
        row = {}
        for k, v in zip(head, vals):
            try:
                row[k] = int(v) if k in ("epoch", "generation", "gallery_version") else float(v)
            except ValueError:
                row[k] = v
        rows.append(row)
    return rows


def _run_from_checkpoint(ckpt: ModelCheckpoint, cfg: ExperimentConfig) -> TrainRun:
    meta = ckpt.metadata
    return TrainRun(cfg.train_config(meta.get("method", "old")), [], ckpt.encoder,
                    ckpt.classifier, ckpt.adapter, int(meta.get("generation", 0)))


# ------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = _guard(Path(args.out), args.force)
    d = cfg.dataset
    if args.kind == "bench":
        ds = _bench_dataset(cfg)
        make_bench(ds, cfg.bench.query_per_class, cfg.run.seed)  # validate before writing
        save_dataset(out, ds, {"query_per_class": cfg.bench.query_per_class,
                               "bench_seed": cfg.run.seed})
    else:
        ds = generate_synthetic(d.class_count, d.per_class, d.input_dim, d.spread,
                                d.noise_fraction, d.seed)
        save_dataset(out, ds)
    sys.stdout.write(cfg.to_text())
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _resolve(args)
    ds = load_dataset(_need(args.dataset, "--dataset"))
    out = Path(args.out_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    old_p, new_p = _guard(out / "old.ds", args.force), _guard(out / "new.ds", args.force)
    sp = make_split(ds, cfg.split.kind, cfg.split.fraction, cfg.run.seed)
    save_dataset(old_p, sp.old_set, {"split": sp.kind, "part": "old"})
    save_dataset(new_p, sp.new_set, {"split": sp.kind, "part": "new"})
    print(f"old\t{len(sp.old_set)}\nnew\t{len(sp.new_set)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    ds = load_dataset(_need(args.dataset, "--dataset"))
    method = args.method
    tc = cfg.train_config(method, args.seed if args.seed is not None else cfg.run.seed)
    old_run = None
    if method not in ("old", "oracle"):
        if args.old is None:
            raise UsageError(f"method {method} needs --old CHECKPOINT")
        old_run = _run_from_checkpoint(load_checkpoint(_need(args.old, "--old")), cfg)
    generation = args.generation if args.generation is not None else (
        0 if method in ("old", "oracle") else old_run.generation + 1)
    out = Path(args.out_dir or cfg.run.output_dir)
    _guard(out / "model.ckpt", args.force)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    run = train(ds, tc, old_run, generation)
    _write_trace(out / "epochs.tsv", run.trace)
    save_checkpoint(out / "model.ckpt", run.checkpoint())
    plotting.plot_loss_trace(run.trace, out / "loss.png", method)
    last = run.trace[-1]
    print(f"method\t{method}\ngeneration\t{generation}\nepochs\t{len(run.trace)}\n"
          f"final_l_new\t{last['l_new']:.6f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    ds = load_dataset(_need(args.dataset, "--dataset"))
    out = _guard(Path(args.out), args.force)
    gen = int(ckpt.metadata.get("generation", 0))
    store = embed(ckpt.encoder, ds, args.name, str(ckpt.metadata.get("method", "model")), gen)
    save_store(out, store)
    print(f"rows\t{len(store)}\ndim\t{store.dim}\ngeneration\t{gen}")
    return EXIT_OK


def cmd_adapt_gallery(args) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    if ckpt.adapter is None:
        raise UsageError("checkpoint has no adapter")
    store = load_store(_need(args.store, "--store"))
    target = int(ckpt.metadata.get("generation", store.generation + 1))
    if store.generation >= target and not args.force:
        raise UsageError(f"store is already at generation {store.generation}; "
                         f"adapter targets generation {target} (use --force)")
    out = _guard(Path(args.out), args.force)
    t0 = time.perf_counter()
    adapted = adapt_store(store, ckpt.adapter, str(ckpt.metadata.get("method", "adapter")))
    dt = time.perf_counter() - t0
    save_store(out, adapted)
    print(f"rows\t{len(adapted)}\ngeneration\t{adapted.generation}\n"
          f"items_per_second\t{len(adapted) / max(dt, 1e-9):.0f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    bench = _load_bench(_need(args.bench, "--bench"))
    query = load_checkpoint(_need(args.query, "--query"))
    old = load_checkpoint(_need(args.old, "--old")) if args.old else None
    oracle = load_checkpoint(_need(args.oracle, "--oracle")) if args.oracle else None
    gallery = load_store(_need(args.gallery_store, "--gallery-store")) if args.gallery_store else None
    adapted = load_store(_need(args.adapted_store, "--adapted-store")) if args.adapted_store else None
    out = Path(args.out_dir or cfg.run.output_dir)
    _guard(out / "report.txt", args.force)
    out.mkdir(parents=True, exist_ok=True)
    has_old = old is not None or gallery is not None
    rep = evaluate_upgrade(
        bench, query.encoder,
        old_encoder=old.encoder if old else None,
        adapter=query.adapter if has_old else None,
        oracle_encoder=oracle.encoder if oracle else None,
        old_classifier=old.classifier if old else None,
        new_classifier=query.classifier,
        gallery_store=gallery, adapted_store=adapted,
        metric=cfg.bench.metric, k=cfg.bench.k, far=cfg.bench.far,
        scatter_count=cfg.bench.scatter_count, seed=cfg.run.seed)
    rep.write(out)
    if rep.entropy_pairs is not None:
        plotting.plot_entropy_scatter(rep.entropy_pairs, out / "entropy_scatter.png")
    for k, v in rep.records():
        print(f"{k}\t{v}")
    return EXIT_OK


def cmd_sequence(args) -> int:
    cfg = _resolve(args)
    fr = cfg.sequence.fractions
    if len(fr) < 2:
        raise UsageError("sequence needs at least two fractions")
    out = Path(args.out_dir or cfg.run.output_dir)
    _guard(out / "summary.tsv", args.force)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    res = experiment.sequence(cfg)
    for method, reps in res.reports.items():
        for rep in reps:
            gdir = out / method / f"gen{rep.generation}"
            gdir.mkdir(parents=True, exist_ok=True)
            (gdir / "report.txt").write_text("".join(f"{k}={v}\n" for k, v in rep.records()))
    for method, runs in res.runs.items():
        for run in runs:
            gdir = out / method / f"gen{run.generation}"
            save_checkpoint(gdir / "model.ckpt", run.checkpoint())
            _write_trace(gdir / "epochs.tsv", run.trace)
    text = experiment.summary_table(res)
    (out / "summary.tsv").write_text(text)
    plotting.plot_sequence(_read_table(out / "summary.tsv"), out / "summary.png")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    """Render figures for every table found under a directory and print a digest."""
    root = _need(args.dir, "--dir")
    made = []
    for tsv in sorted(root.rglob("*.tsv")):
        png = tsv.with_suffix(".png")
        if tsv.name == "epochs.tsv":
            plotting.plot_loss_trace(_read_table(tsv), png)
        elif tsv.name == "entropy_scatter.tsv":
            pairs = np.loadtxt(tsv, skiprows=1, ndmin=2)
            plotting.plot_entropy_scatter(pairs, png)
        elif tsv.name == "summary.tsv":
            plotting.plot_sequence(_read_table(tsv), png)
        else:
            continue
        made.append(png)
    for rep in sorted(root.rglob("report.txt")):
        for k, v in read_records(rep).items():
            print(f"{rep.parent.relative_to(root)}\t{k}\t{v}")
    for png in made:
        print(f"figure\t{png.relative_to(root)}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """generate, split, train old/oracle/bct/dmu, embed, adapt, evaluate, all in one directory."""
    cfg = _resolve(args)
    out = Path(args.out_dir or cfg.run.output_dir)
    _guard(out / "pipeline.done", args.force)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    res = experiment.single_upgrade(cfg)
    for name, run in res.runs.items():
        rdir = out / name
        rdir.mkdir(exist_ok=True)
        save_checkpoint(rdir / "model.ckpt", run.checkpoint())
        _write_trace(rdir / "epochs.tsv", run.trace)
        plotting.plot_loss_trace(run.trace, rdir / "loss.png", name)
    old = res.runs["old"]
    gallery = embed(old.encoder, res.bench.gallery, "gallery", "old", 0)
    save_store(out / "gallery_gen0.store", gallery)
    save_store(out / "gallery_gen1.store", adapt_store(gallery, res.runs["dmu"].adapter, "dmu"))
    for method, rep in res.reports.items():
        rep.write(out / method)
        if rep.entropy_pairs is not None:
            plotting.plot_entropy_scatter(rep.entropy_pairs, out / method / "entropy_scatter.png")
        for k, v in rep.records():
            print(f"{method}\t{k}\t{v}")
    (out / "pipeline.done").write_text("ok\n")
    return EXIT_OK


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmu", description="Darwinian model upgrades on synthetic retrieval data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="INI file; flags override it")
        add_config_flags(sp)
        return sp

    sp = with_config(command("generate", cmd_generate, "write a synthetic dataset or bench"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", choices=("train", "bench"), default="train")

    sp = with_config(command("split", cmd_split, "split a dataset into old/new parts"))
    sp.add_argument("--dataset")
    sp.add_argument("--out-dir", help="default: [run] output_dir")

    sp = with_config(command("train", cmd_train, "train one model"))
    sp.add_argument("--dataset")
    sp.add_argument("--method", required=True,
                    choices=("old", "oracle", "bct", "dmu", "dmu_least_conf", "bct_regression",
                             "dmu_regression"))
    sp.add_argument("--old", help="old checkpoint (bct/dmu methods)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--generation", type=int)
    sp.add_argument("--out-dir", help="default: [run] output_dir")

    sp = command("embed", cmd_embed, "encode a dataset into an embedding store")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--name", default="gallery")
    sp.add_argument("--out", required=True)

    sp = command("adapt-gallery", cmd_adapt_gallery, "refresh a stored gallery with an adapter")
    sp.add_argument("--checkpoint")
    sp.add_argument("--store")
    sp.add_argument("--out", required=True)

    sp = with_config(command("evaluate", cmd_evaluate, "score a query model against galleries"))
    sp.add_argument("--bench")
    sp.add_argument("--query", help="new model checkpoint")
    sp.add_argument("--old", help="old model checkpoint")
    sp.add_argument("--oracle", help="oracle checkpoint")
    sp.add_argument("--gallery-store", help="deployed gallery store (default: encode with --old)")
    sp.add_argument("--adapted-store")
    sp.add_argument("--out-dir", help="default: [run] output_dir")

    sp = with_config(command("sequence", cmd_sequence, "run sequential upgrades"))
    sp.add_argument("--out-dir", help="default: [run] output_dir")

    sp = command("report", cmd_report, "render figures for the tables in a directory")
    sp.add_argument("--dir")

    sp = with_config(command("pipeline", cmd_pipeline, "one old-to-new upgrade end to end"))
    sp.add_argument("--out-dir", help="default: [run] output_dir")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.fn(args)
    except UsageError as e:
        print(f"dmu: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ContainerError) as e:
        print(f"dmu: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as e:
        print(f"dmu: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"dmu: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ArithmeticError) as e:
        print(f"dmu: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
