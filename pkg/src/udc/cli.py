"""Command line entry point: ``udc gen | train | solve | bench | inspect-checkpoint``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import nnet
from .bench import BenchConfig, load_test_set, run_benchmark, write_test_set
from .model import Models, file_hash
from .problems import Instance, Kind, generate_instance
from .solve import SolveConfig, solve
from .train import TrainConfig, train

log = logging.getLogger("udc")

KINDS = [k.value for k in Kind]
INITIALIZERS = ["policy", "random", "nearest_greedy", "random_insertion"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_solve_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stages", type=int, default=2, help="conquering stages r")
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--sub-n", type=int, default=10, help="sub-problem size")
    p.add_argument("--beta", type=int, default=None)
    p.add_argument("--T", type=int, default=1, help="heatmap revisits")
    p.add_argument("--K", type=int, default=None, help="sparse-graph degree")
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--conquer-mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--backend", choices=["neural", "exact"], default="neural")
    p.add_argument("--initial", choices=INITIALIZERS, default="policy")
    p.add_argument("--no-margin-recycling", action="store_true")
    p.add_argument("--no-normalize", action="store_true")


def _solve_config(a, seed: int) -> SolveConfig:
    return SolveConfig(
        stages=a.stages, alpha=a.alpha, n=a.sub_n, beta=a.beta, T=a.T, mode=a.mode, conquer_mode=a.conquer_mode,
        seed=seed, margin_recycling=not a.no_margin_recycling, backend=a.backend, initial=a.initial, K=a.K,
        normalize=not a.no_normalize,
    )


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="udc", description="Unified divide-and-conquer solver for combinatorial problems.")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate random instances")
    g.add_argument("--problem", choices=KINDS, required=True)
    g.add_argument("--n", type=int, required=True, help="instance size N")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train both policies with DCR")
    t.add_argument("--problem", choices=KINDS, required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--sizes", type=int, nargs=2, metavar=("LO", "HI"), default=(20, 60))
    t.add_argument("--sub-n", type=int, default=10)
    t.add_argument("--alpha", type=int, default=8)
    t.add_argument("--beta", type=int, default=8)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--epoch-size", type=int, default=64)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr-divide", type=float, default=1e-3)
    t.add_argument("--lr-conquer", type=float, default=1e-3)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--width", type=int, default=32)
    t.add_argument("--conquer-width", type=int, default=32)
    t.add_argument("--K", type=int, default=None)
    t.add_argument("--T", type=int, default=1)
    t.add_argument("--no-dcr", action="store_true", help="skip the Reunion pass")
    t.add_argument("--one-sided", action="store_true", help="disable two-sided conquering rollouts")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")

    s = sub.add_parser("solve", help="solve one instance")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--instance", default=None, help="instance JSON or .tsp file")
    s.add_argument("--problem", choices=KINDS, default=None, help="generate a random instance of this kind")
    s.add_argument("--n", type=int, default=None, help="size of the generated instance")
    s.add_argument("--model", default=None, help="checkpoint")
    s.add_argument("--out", default=None, help="result JSON (stdout when omitted)")
    _add_solve_flags(s)

    b = sub.add_parser("bench", help="run a benchmark and write report.json / report.csv")
    b.add_argument("--test-set", required=True)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--model", default=None)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-exact-references", action="store_true")
    _add_solve_flags(b)

    c = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    c.add_argument("path")
    return root


def _cmd_gen(a) -> None:
    insts = [generate_instance(a.problem, a.n, a.seed + i) for i in range(a.count)]
    write_test_set(a.out, insts)
    log.info("wrote %d %s instances to %s", len(insts), a.problem, a.out)


def _cmd_train(a) -> None:
    cfg = TrainConfig(
        kind=a.problem, sizes=tuple(a.sizes), n=a.sub_n, alpha=a.alpha, beta=a.beta, epochs=a.epochs,
        epoch_size=a.epoch_size, batch_size=a.batch_size, lr_divide=a.lr_divide, lr_conquer=a.lr_conquer,
        seed=a.seed, two_sided=False if a.one_sided else None, dcr_enabled=False if a.no_dcr else None,
        layers=a.layers, width=a.width, conquer_width=a.conquer_width, K=a.K, T=a.T,
    )
    models = Models.load(a.resume) if a.resume else None
    if models is not None:
        models.require_kind(cfg.kind)

    def progress(row):
        log.info("epoch %d  f(x0)=%.4f  f(x1)=%.4f  f(x2)=%.4f", row["epoch"], row["mean_f_x0"], row["mean_f_x1"], row["mean_f_x2"])

    train(cfg, a.out, models, progress)
    log.info("checkpoint written to %s", Path(a.out) / "model.ckpt")


def _load_instance(a) -> tuple[Instance, float]:
    if a.instance:
        items = load_test_set(a.instance)
        if len(items) != 1:
            raise ValueError(f"{a.instance} holds {len(items)} instances; solve takes one")
        return items[0].instance, items[0].scale
    if a.problem is None or a.n is None:
        raise UsageError("solve needs --instance, or --problem with --n")
    return generate_instance(a.problem, a.n, a.seed), 1.0


def _cmd_solve(a) -> None:
    inst, scale = _load_instance(a)
    models = Models.load(a.model) if a.model else None
    res = solve(inst, models, _solve_config(a, a.seed))
    out = res.to_dict()
    out["kind"] = inst.kind.value
    out["n"] = inst.n
    out["scale"] = scale
    text = json.dumps(out, indent=2)
    if a.out:
        Path(a.out).write_text(text)
        log.info("best objective %.6f after %d stages -> %s", res.best.objective, len(res.trace) - 1, a.out)
    else:
        print(text)


def _cmd_bench(a) -> None:
    cfg = BenchConfig(a.test_set, a.out, a.model, _solve_config(a, a.seed), not a.no_exact_references)
    rep = run_benchmark(cfg)
    agg = rep.aggregate()
    log.info("%d instances, mean objective %s, mean gap %s", agg["count"], agg["objective"]["mean"], agg["gap_pct"]["mean"])


def _cmd_inspect(a) -> None:
    header = nnet.read_header(a.path)
    counts: dict[str, int] = {}
    for e in header["entries"]:
        if e["section"] == "param":
            counts[e["store"]] = counts.get(e["store"], 0) + e["count"]
    info = {
        "file_hash": file_hash(a.path),
        "config_hash": header["config_hash"],
        "meta": header["meta"],
        "optim": header["optim"],
        "parameters": counts,
    }
    print(json.dumps(info, indent=2))


COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "solve": _cmd_solve, "bench": _cmd_bench, "inspect-checkpoint": _cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"udc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"udc: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
