"""Command-line driver: ``python -m latentrag <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment as X
from . import tensor as T
from .agent import ARMS, LatentRAG
from .config import ConfigError, build_config, write_config
from .records import DataError, write_tsv
from .retrieval import CorpusIndex, DegenerateMeanError, IndexBuildError, anisotropy_report
from .synth import GenerationError
from .training import SequenceTooLong

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("latentrag")


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--preset", default="desk", help="desk (default) or paper")
    common.add_argument("--workdir", help="output directory (overrides the config's workdir)")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="latentrag", description="Latent-token retrieval agent experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="corpus, QA splits, reference index and teacher runs")
    g.add_argument("--hops", type=int, choices=(1, 2), help="restrict questions to one hop count")
    sub.add_parser("build-index", parents=[common], help="pretrain the reference encoder and index the corpus")
    sub.add_parser("teach", parents=[common], help="run the explicit teacher over both splits")

    t = sub.add_parser("train", parents=[common], help="train the latent agent")
    t.add_argument("--arm", choices=ARMS)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint")
    e.add_argument("--decode", action="store_true", help="also decode latent blocks to text")

    s = sub.add_parser("sweep-tokens", parents=[common], help="EM grid over thought/subquery slot counts")
    s.add_argument("--m-list", type=_int_list, default=[2, 4, 8])
    s.add_argument("--n-list", type=_int_list, default=[8, 16, 32])

    a = sub.add_parser("analyze", parents=[common], help="anisotropy, logit-lens and decode-length statistics")
    a.add_argument("what", choices=("index", "trajectories"))
    a.add_argument("--checkpoint")
    a.add_argument("--limit", type=int, default=20, help="questions to run for trajectory analysis")
    a.add_argument("--top", type=int, default=5, help="logit-lens columns per latent token")

    r = sub.add_parser("report", parents=[common], help="train and evaluate ablation arms, check their ordering")
    r.add_argument("--arms", default=",".join(ARMS[:4]))
    r.add_argument("--seeds", type=_int_list, default=[0])
    return p


def _config(args):
    overrides = list(args.set)
    if getattr(args, "hops", None):
        overrides.append(f"hops={args.hops}")
    if getattr(args, "arm", None):
        overrides.append(f"arm={args.arm}")
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    return build_config(args.config, overrides, args.preset)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1, default=str))


def cmd_gen_data(cfg, wd, args):
    out = X.stage_gen_data(cfg, wd)
    out.update(X.stage_build_index(cfg, wd, log.info))
    out.update(X.stage_teach(cfg, wd))
    write_config(cfg, wd.config)
    _emit(out)


def cmd_build_index(cfg, wd, args):
    _emit(X.stage_build_index(cfg, wd, log.info))


def cmd_teach(cfg, wd, args):
    _emit(X.stage_teach(cfg, wd))


def cmd_train(cfg, wd, args):
    _emit(X.stage_train(cfg, wd, log.info))


def cmd_eval(cfg, wd, args):
    ev = X.stage_eval(cfg, wd, args.checkpoint, args.decode or None)
    _emit({"latent": ev.latent.metric_rows(), "explicit": ev.explicit.metric_rows() if ev.explicit else None,
           "outputs": str(wd.eval_dir)})


def cmd_sweep_tokens(cfg, wd, args):
    world = X.load_world(wd)
    grid = X.sweep_tokens(cfg, world, args.m_list, args.n_list, log.info)
    rows = [[m] + [grid[(m, n)] for n in args.n_list] for m in args.m_list]
    path = wd.root / "sweep_tokens.tsv"
    write_tsv(path, ["m\\n"] + [str(n) for n in args.n_list], rows, cfg.hash())
    _emit({"grid": {f"{m},{n}": v for (m, n), v in grid.items()}, "output": str(path)})


def cmd_analyze(cfg, wd, args):
    out_dir = wd.root / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.what == "index":
        rep = anisotropy_report(CorpusIndex.load(wd.index).embeddings)
        (out_dir / "anisotropy.json").write_text(rep.to_json(), encoding="utf-8")
        _emit(json.loads(rep.to_json()))
        return
    world = X.load_world(wd)
    system = LatentRAG.load(args.checkpoint or wd.checkpoint)
    items = world.test_items[:args.limit]
    trajs = X.run_questions([it.question for it in items], system, world.index, X.loop_config(cfg, True))
    rows = X.logit_lens_rows(system, trajs, args.top)
    write_tsv(out_dir / "logit_lens.tsv", ["question", "step", "kind", "slot"] +
              [f"top{i}" for i in range(1, args.top + 1)], rows, cfg.hash())
    stats = X.ratio_stats([X.max_length_ratio(t.decoded_lengths) for t in trajs if t.decoded_lengths])
    write_tsv(out_dir / "max_length_ratio.tsv", ["stat", "value"], sorted(stats.items()), cfg.hash())
    _emit({"latent_tokens": len(rows), "max_length_ratio": stats, "outputs": str(out_dir)})


def cmd_report(cfg, wd, args):
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise UsageExit(f"unknown arms: {', '.join(bad)}")
    world = X.load_world(wd)
    per_seed = {arm: [X.run_arm(cfg, world, arm, seed, progress=log.info) for seed in args.seeds] for arm in arms}
    path = wd.root / "ablation.tsv"
    flags = X.write_ablation(path, cfg, per_seed)
    _emit({"retrieval_success": {a: [r.retrieval_success for r in reps] for a, reps in per_seed.items()},
           "flags": flags, "output": str(path)})


COMMANDS = {"gen-data": cmd_gen_data, "build-index": cmd_build_index, "teach": cmd_teach, "train": cmd_train,
            "eval": cmd_eval, "sweep-tokens": cmd_sweep_tokens, "analyze": cmd_analyze, "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(message)s", stream=sys.stderr)
        cfg = _config(args)
        wd = X.Workdir(cfg.workdir)
        COMMANDS[args.command](cfg, wd, args)
        return EXIT_OK
    except (UsageExit, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GenerationError, IndexBuildError, SequenceTooLong, FileNotFoundError, T.ArchiveError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.DivergenceError, T.UndefinedSimilarityError, DegenerateMeanError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
