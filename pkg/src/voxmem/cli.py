"""Command line entry point: ``voxmem <subcommand> [options]``.

Every subcommand reads the sectioned config file (``--config``) and applies
``--set key=value`` overrides. Results go to files; stdout carries one JSON
record per line. Failures print a single ``error:`` line to stderr and exit
with 1 (usage/config), 2 (I/O or file format) or 3 (numeric or contract).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import report
from .ablation import ABLATION_CELLS, run_ablation
from .autodiff import load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config
from .errors import ConfigError, EmptySurfaceError, FormatError, VoxmemError
from .memory import MemoryBank, inspect_bank, load_write_counts, save_write_counts
from .mesh import marching_cubes, write_obj
from .pipeline import build_model, evaluate, reconstruct, train
from .synth import build_corpus, corpus_hash, load_corpus, near_duplicate_report, read_imgf
from .voxels import VoxelGrid, read_grid, write_voxf

log = logging.getLogger("voxmem")

CONFIG_NAME = "config.ini"
WEIGHTS_NAME = "weights.vmwt"
MEMORY_NAME = "memory.vmem"
COUNTS_NAME = "memory.counts.json"


def emit(record):
    sys.stdout.write(report.dumps(record) + "\n")
    sys.stdout.flush()


def _config(args, run_dir=None):
    overrides = list(args.set or [])
    if args.config:
        return load_config(args.config, overrides)
    if run_dir and os.path.exists(os.path.join(run_dir, CONFIG_NAME)):
        return load_config(os.path.join(run_dir, CONFIG_NAME), overrides)
    return PipelineConfig().with_overrides(overrides)


def _load_run(cfg, run_dir, need_memory=True):
    model = build_model(cfg)
    model.load_state(load_checkpoint(os.path.join(run_dir, WEIGHTS_NAME)))
    bank = None
    mem_path = os.path.join(run_dir, MEMORY_NAME)
    if cfg.memory_enabled and need_memory:
        if not os.path.exists(mem_path):
            raise ConfigError(f"memory is enabled but {mem_path} does not exist")
        bank = MemoryBank.load(mem_path, cfg.r_v, cfg.read_threshold, cfg.write_threshold)
        if bank.key_dim != cfg.n_k:
            raise ConfigError(f"snapshot key dimension {bank.key_dim} does not match n_k={cfg.n_k}")
    return model, bank


def cmd_gen_data(args):
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    corpus = build_corpus(cfg.corpus_config(), args.out)
    best, ok = near_duplicate_report(corpus)
    emit({"event": "gen-data", "out": args.out, "corpus_hash": corpus_hash(args.out),
          "counts": {s: len(corpus.records(s)) for s in corpus.splits},
          "min_train_similarity": float(best.min()), "near_duplicates_ok": ok})


def cmd_train(args):
    cfg = _config(args)
    corpus = load_corpus(args.data, splits=("train",))
    if corpus.config.r_v != cfg.r_v or corpus.config.r_i != cfg.r_i:
        raise ConfigError(f"corpus has r_v={corpus.config.r_v}, r_i={corpus.config.r_i}; "
                          f"config expects r_v={cfg.r_v}, r_i={cfg.r_i}")
    os.makedirs(os.path.join(args.out, "figures"), exist_ok=True)
    cfg.save(os.path.join(args.out, CONFIG_NAME))
    result = train(cfg, corpus, progress=lambda s: emit({"event": "epoch", **s}))
    save_checkpoint(os.path.join(args.out, WEIGHTS_NAME), result.model.named_parameters())
    if result.bank is not None:
        result.bank.save(os.path.join(args.out, MEMORY_NAME))
        save_write_counts(result.bank, os.path.join(args.out, COUNTS_NAME))
    header = {"record": "header", "corpus_hash": corpus_hash(args.data), "config": cfg.to_text()}
    report.write_jsonl(os.path.join(args.out, "train_report.jsonl"),
                       [header] + [dict(e, record="epoch") for e in result.epochs])
    report.write_jsonl(os.path.join(args.out, "train_steps.jsonl"), result.steps)
    if not args.no_figures:
        report.plot_losses(result.epochs, os.path.join(args.out, "figures", "losses.png"))
        report.plot_retrieval(result.epochs, os.path.join(args.out, "figures", "retrieval.png"))
    emit({"event": "train", "out": args.out, "epochs": len(result.epochs),
          "memory_slots": len(result.bank) if result.bank is not None else 0,
          "final": result.epochs[-1]})


def cmd_eval(args):
    cfg = _config(args, args.run)
    model, bank = _load_run(cfg, args.run)
    corpus = load_corpus(args.data, splits=(args.split,))
    rep = evaluate(cfg, model, bank, corpus, args.split, with_fscore=not args.no_fscore)
    out = args.out or os.path.join(args.run, f"eval_{args.split}.jsonl")
    summary = dict(rep.summary(), record="summary", corpus_hash=corpus_hash(args.data))
    header = {"record": "header", "split": args.split, "iou_threshold": cfg.iou_threshold,
              "iso_level": cfg.iso_level, "n_points": cfg.n_points, "fscore_d": list(cfg.fscore_d),
              "fscore_frame": "ground-truth mesh bounding box scaled to longest side 1"}
    report.write_jsonl(out, [header] + [dict(it, record="item") for it in rep.items] + [summary])
    if not args.no_figures:
        fig_dir = os.path.join(os.path.dirname(os.path.abspath(out)), "figures")
        os.makedirs(fig_dir, exist_ok=True)
        report.plot_iou_hist(rep.items, os.path.join(fig_dir, f"iou_{args.split}.png"), cfg.iou_threshold)
    emit({"event": "eval", "report": out, **summary})


def cmd_reconstruct(args):
    cfg = _config(args, args.run)
    model, bank = _load_run(cfg, args.run)
    image = read_imgf(args.image)
    if image.shape != (3, cfg.r_i, cfg.r_i):
        raise ConfigError(f"image has shape {image.shape}, config expects (3, {cfg.r_i}, {cfg.r_i})")
    probs, seqs = reconstruct(cfg, model, bank, image)
    if cfg.memory_enabled and len(seqs[0]) == 0:
        print("warning: nothing retrieved from memory; decoding with the zero prior", file=sys.stderr)
    r = cfg.r_v
    grid = VoxelGrid(probs[0].reshape(r, r, r))
    write_voxf(args.out, grid)
    rec = {"event": "reconstruct", "out": args.out, "retrieved": len(seqs[0]),
           "occupied": int(np.count_nonzero(probs[0] > cfg.iou_threshold))}
    if args.obj:
        mesh = marching_cubes(grid, cfg.iso_level)
        write_obj(args.obj, mesh)
        rec.update(obj=args.obj, triangles=len(mesh.triangles))
    emit(rec)


def cmd_mem_inspect(args):
    cfg = _config(args, args.run)
    path = args.memory or os.path.join(args.run, MEMORY_NAME)
    bank = MemoryBank.load(path, None, cfg.read_threshold, cfg.write_threshold)
    counts = args.counts or os.path.join(os.path.dirname(os.path.abspath(path)), COUNTS_NAME)
    has_counts = os.path.exists(counts)
    if has_counts:
        load_write_counts(bank, counts)
    stats = inspect_bank(bank, bins=args.bins)
    if args.figure:
        report.plot_memory(stats, args.figure)
    emit({"event": "mem-inspect", "snapshot": path, "write_counts_available": has_counts,
          **{k: v for k, v in stats.items() if k in ("capacity", "count", "key_dim", "resolution",
                                                      "max_key_norm_residual",
                                                      "pairs_at_or_above_write_threshold",
                                                      "value_similarity_hist", "value_similarity_edges")}})
    for i in range(stats["count"]):
        emit({"slot": i, "age": stats["ages"][i],
              "write_count": stats["write_counts"][i] if has_counts else None,
              "key_norm_residual": stats["key_norm_residuals"][i],
              "occupancy": stats["occupancy"][i]})


def cmd_export_mesh(args):
    cfg = _config(args)
    grid = read_grid(args.grid)
    iso = cfg.iso_level if args.iso is None else args.iso
    mesh = marching_cubes(grid, iso)
    if mesh.empty:
        raise EmptySurfaceError(f"{args.grid} has no surface at iso level {iso}")
    write_obj(args.out, mesh)
    emit({"event": "export-mesh", "out": args.out, "vertices": len(mesh.vertices),
          "triangles": len(mesh.triangles), "euler_characteristic": mesh.euler_characteristic()})


def cmd_ablate(args):
    cfg = _config(args)
    corpus = load_corpus(args.data)
    names = args.cells or list(ABLATION_CELLS)
    unknown = [n for n in names if n not in ABLATION_CELLS]
    if unknown:
        raise ConfigError(f"unknown ablation cells {unknown}; choose from {list(ABLATION_CELLS)}")
    cells = {n: ABLATION_CELLS[n] for n in names}
    os.makedirs(os.path.join(args.out, "figures"), exist_ok=True)
    result = run_ablation(cfg, corpus, cells, tuple(args.seeds), corpus_hash(args.data),
                          with_fscore=not args.no_fscore,
                          progress=lambda rec: emit({"event": "ablation-run", **rec}))
    report.write_jsonl(os.path.join(args.out, "ablation.jsonl"),
                       [dict(r, record="run") for r in result.runs]
                       + [dict(r, record="cell") for r in result.rows])
    if not args.no_figures:
        report.plot_ablation(result.rows, os.path.join(args.out, "figures", "ablation_iou.png"))
    for row in result.rows:
        emit({"event": "ablation-cell", **row})


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 like every other configuration problem."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    p = _Parser(prog="voxmem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="sectioned key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return sp

    sp = common(sub.add_parser("gen-data", help="build the synthetic corpus"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train model and memory"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="evaluate a trained run on one split"))
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test-occluded", choices=("train", "test-clean", "test-occluded"))
    sp.add_argument("--out", help="report path (default RUN/eval_SPLIT.jsonl)")
    sp.add_argument("--no-fscore", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("reconstruct", help="image file -> VOXF (+ OBJ)"))
    sp.add_argument("--run", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--obj")
    sp.set_defaults(func=cmd_reconstruct)

    sp = common(sub.add_parser("mem-inspect", help="dump memory slot statistics"))
    sp.add_argument("--run")
    sp.add_argument("--memory", help="snapshot path (default RUN/memory.vmem)")
    sp.add_argument("--counts", help="write-count sidecar (default beside the snapshot)")
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--figure", help="write histogram figure here")
    sp.set_defaults(func=cmd_mem_inspect)

    sp = common(sub.add_parser("export-mesh", help="VOXB/VOXF grid -> OBJ mesh"))
    sp.add_argument("--grid", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iso", type=float)
    sp.set_defaults(func=cmd_export_mesh)

    sp = common(sub.add_parser("ablate", help="train/evaluate ablation cells over seeds"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cells", nargs="+", help=f"subset of {', '.join(ABLATION_CELLS)}")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--no-fscore", action="store_true")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    return p


def exit_code(exc):
    if isinstance(exc, ConfigError):
        return 1
    if isinstance(exc, (FormatError, OSError)):
        return 2
    return 3


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    if args.command == "mem-inspect" and not (args.run or args.memory):
        print("error: mem-inspect needs --run or --memory", file=sys.stderr)
        return 1
    try:
        args.func(args)
    except (VoxmemError, OSError, ValueError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        if isinstance(exc, OSError) and exc.filename and exc.filename not in msg:
            msg = f"{msg}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
