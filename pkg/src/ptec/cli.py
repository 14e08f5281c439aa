"""Command-line experiment runner.

    ptec <command> --config exp.json [--set key.path=value ...] [--out DIR]

Commands: gen-data, pretrain-cssl, pretrain-ptec, iterate, adapt-eval, gradcheck.
Exit status is 0 on success, 1 on invalid configuration or input, 2 on a
numerical failure. Machine-readable artifacts go to the output directory;
a short human summary goes to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, MaskedCfg, ResolvedConfig, load_config
from .diffcore import grad_check
from .errors import ConfigError, FileFormatError, NumericalError, PtecError
from .evaluation import compare_runs, evaluate_checkpoint, mean_post_adaptation_loss
from .metrics import write_metrics
from .batching import random_batch
from .objectives import (MaskedPredictionModel, MaskedPredictionObjective, MaskSpec,
                         QuadraticSource, RandomQuantizer, SourceShift,
                         generate_synthetic_sources, random_shifts, save_sources)
from .trainer import (COLD_START_GUIDANCE, RoundFailure, checkpoint_filename, cssl_train,
                      mutual_init_rounds, ptec_train)

OUTPUT_ENV = "PTEC_OUTPUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("ptec")


@dataclass
class Problem:
    objectives: list
    sources: list | None
    model_kind: str
    init: np.ndarray | None = None


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Objectives (and synthetic sources) described by ``cfg``; deterministic in its seed."""
    if cfg.model == "quadratic":
        objs = [QuadraticSource(np.atleast_2d(s.A), np.atleast_1d(s.c), source_id=i)
                for i, s in enumerate(cfg.quadratic.sources)]
        init = None if cfg.quadratic.init is None else np.asarray(cfg.quadratic.init, float)
        return Problem(objs, None, cfg.model, init)
    d = cfg.data
    if d.shifts is not None:
        shifts = [SourceShift(np.asarray(s.mean, float), np.asarray(s.scale, float), s.rho)
                  for s in d.shifts]
        if any(s.mean.size != d.feature_dim or s.scale.size != d.feature_dim for s in shifts):
            raise ConfigError("shift means/scales must have feature_dim entries")
    else:
        shifts = random_shifts(d.num_sources, d.feature_dim, cfg.seed, mean_spread=d.mean_spread,
                               rho=d.rho)
    sources = generate_synthetic_sources(shifts, d.counts, d.frames, cfg.seed,
                                         d.heldout_fraction, d.names)
    m = cfg.masked or MaskedCfg()
    quantizer = RandomQuantizer.random(d.feature_dim, m.code_dim, m.codebook_size, cfg.seed)
    model = MaskedPredictionModel(quantizer, m.hidden, m.context, MaskSpec(**m.mask.model_dump()))
    objs = [MaskedPredictionObjective(model, s) for s in sources]
    return Problem(objs, sources, cfg.model)


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, resolved: ResolvedConfig):
        self.resolved = resolved
        self.cfg = resolved.config
        self.out = Path(self.cfg.output_dir)

    def start(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        payload = dict(self.resolved.payload, digest=self.resolved.digest,
                       output_dir=str(self.out))
        (self.out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def checkpoint(self, params, label: str, epoch: int) -> Checkpoint:
        ckpt = Checkpoint(params=np.array(params, dtype=np.float64), model_kind=self.cfg.model,
                          round_label=label, epoch=epoch, seed=self.cfg.seed,
                          config_digest=self.resolved.digest)
        save_checkpoint(self.out / checkpoint_filename(label), ckpt)
        return ckpt

    def epoch_hook(self, label: str):
        if not self.cfg.epoch_checkpoints:
            return None

        def hook(state):
            self.checkpoint(state.theta, f"{label}.epoch{state.epoch}", state.epoch)
        return hook

    def write_json(self, name: str, obj) -> None:
        (self.out / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_init(path, problem: Problem) -> np.ndarray:
    ckpt = load_checkpoint(path)
    if ckpt.dim != problem.objectives[0].dim:
        raise ConfigError(f"{path}: checkpoint has dim {ckpt.dim}, model needs "
                          f"{problem.objectives[0].dim}")
    return ckpt.params


def _reports_json(reports) -> list:
    return [asdict(r) | {"losses": list(r.losses)} for r in reports]


def _adapt_reports(run: Run, problem: Problem, theta, label: str):
    a = run.cfg.adapt
    bpe = run.cfg.cssl.batches_per_epoch if run.cfg.cssl else 1
    return evaluate_checkpoint(theta, problem.objectives, a.steps, a.lr, problem.sources,
                               bpe, run.cfg.seed, label)


def cmd_gen_data(run: Run, args) -> int:
    if run.cfg.model != "masked-prediction":
        raise ConfigError("gen-data needs model 'masked-prediction'")
    problem = build_problem(run.cfg)
    run.start()
    save_sources(run.out / "data.bin", problem.sources, run.cfg.seed)
    for s in problem.sources:
        print(f"source {s.source_id} ({s.name}): {len(s.samples)} train, "
              f"{len(s.heldout)} held out")
    return EXIT_OK


def cmd_pretrain_cssl(run: Run, args) -> int:
    cfg = run.cfg.cssl_config()
    problem = build_problem(run.cfg)
    init = _load_init(args.init, problem) if args.init else problem.init
    run.start()
    res = cssl_train(cfg, problem.objectives, problem.sources, init, workers=args.workers,
                     on_epoch_end=run.epoch_hook("cssl"))
    write_metrics(run.out / "cssl.metrics.csv", res.records)
    run.checkpoint(res.theta, "cssl", cfg.epochs)
    print(f"cssl: {len(res.records)} steps, final global loss {res.records[-1].global_loss:.6g}")
    return EXIT_OK


def cmd_pretrain_ptec(run: Run, args) -> int:
    if not args.init and not args.cold_start:
        raise ConfigError(f"pretrain-ptec needs --init CKPT ({COLD_START_GUIDANCE}); "
                          "use --cold-start to override")
    cfg = run.cfg.ptec_config()
    problem = build_problem(run.cfg)
    init = _load_init(args.init, problem) if args.init else None
    run.start()
    res = ptec_train(cfg, problem.objectives, problem.sources, init,
                     cold_start=args.cold_start, workers=args.workers,
                     on_epoch_end=run.epoch_hook("ptec"))
    write_metrics(run.out / "ptec.metrics.csv", res.records)
    run.checkpoint(res.theta, "ptec", cfg.epochs)
    print(f"ptec: {len(res.records)} iterations, final global loss "
          f"{res.records[-1].global_loss:.6g}")
    return EXIT_OK


def cmd_iterate(run: Run, args) -> int:
    cssl_cfg, ptec_cfg = run.cfg.cssl_config(), run.cfg.ptec_config()
    if args.rounds < 1:
        raise ConfigError("--rounds must be >= 1")
    problem = build_problem(run.cfg)
    run.start()
    res = mutual_init_rounds(cssl_cfg, ptec_cfg, problem.objectives, problem.sources,
                             args.rounds, theta0=problem.init, checkpoint_dir=run.out,
                             model_kind=run.cfg.model, config_digest=run.resolved.digest,
                             workers=args.workers,
                             persist_optimizer_state=run.cfg.persist_optimizer_state)
    summary = []
    for ckpt in res.checkpoints:
        write_metrics(run.out / f"{ckpt.round_label.lower()}.metrics.csv",
                      res.metrics[ckpt.round_label])
        row = {"label": ckpt.round_label, "file": checkpoint_filename(ckpt.round_label)}
        if run.cfg.adapt is not None:
            reports = _adapt_reports(run, problem, ckpt.params, ckpt.round_label)
            row["mean_post_adaptation_loss"] = mean_post_adaptation_loss(reports)
        summary.append(row)
        extra = (f"  mean post-adaptation loss {row['mean_post_adaptation_loss']:.6g}"
                 if "mean_post_adaptation_loss" in row else "")
        print(f"{ckpt.round_label}: {row['file']}{extra}")
    run.write_json("rounds.json", summary)
    return EXIT_OK


def cmd_adapt_eval(run: Run, args) -> int:
    if run.cfg.adapt is None:
        raise ConfigError("adapt-eval needs an 'adapt' section")
    if not args.ckpt:
        raise ConfigError("adapt-eval needs at least one --ckpt")
    problem = build_problem(run.cfg)
    thetas = [(p, _load_init(p, problem)) for p in args.ckpt]
    run.start()
    out = {"runs": []}
    all_reports = []
    for path, theta in thetas:
        label = load_checkpoint(path).round_label or Path(path).stem
        reports = _adapt_reports(run, problem, theta, label)
        all_reports.append(reports)
        mean = mean_post_adaptation_loss(reports)
        out["runs"].append({"checkpoint": str(path), "label": label, "mean": mean,
                            "reports": _reports_json(reports)})
        print(f"{label}: mean post-adaptation loss {mean:.6g}")
    if len(all_reports) == 2:
        cmp = compare_runs(*all_reports)
        out["comparison"] = {"deltas": {str(k): v for k, v in cmp.deltas.items()},
                             "mean_delta": cmp.mean_delta, "a_wins": cmp.a_wins,
                             "b_wins": cmp.b_wins}
        print(f"mean delta (first - second): {cmp.mean_delta:+.6g}; "
              f"second better on {cmp.b_wins}/{len(cmp.deltas)} sources")
    run.write_json("adaptation.json", out)
    return EXIT_OK


def cmd_gradcheck(run: Run, args) -> int:
    gc = run.cfg.gradcheck
    problem = build_problem(run.cfg)
    tol = gc.tol if gc.tol is not None else (1e-7 if problem.model_kind == "quadratic" else 1e-5)
    run.start()
    rng = np.random.default_rng([run.cfg.seed, 0x6C])
    rows = []
    for obj in problem.objectives:
        worst = None
        for _ in range(gc.probes):
            params = obj.initial_params(rng)
            batch = None
            if problem.sources is not None:
                batch = random_batch(problem.sources[obj.source_id], gc.batch_size, rng)
            rep = grad_check(obj, params, batch, gc.h, tol)
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        rows.append({"source_id": obj.source_id, "probes": gc.probes,
                     "max_rel_error": worst.max_rel_error, "worst_index": worst.worst_index,
                     "passed": worst.passed})
        print(f"source {obj.source_id}: max rel error {worst.max_rel_error:.3g} "
              f"({'pass' if worst.passed else 'FAIL'})")
    passed = all(r["passed"] for r in rows)
    run.write_json("gradcheck.json", {"tol": tol, "h": gc.h, "passed": passed, "sources": rows})
    return EXIT_OK if passed else EXIT_NUMERICAL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-cssl": cmd_pretrain_cssl,
    "pretrain-ptec": cmd_pretrain_ptec,
    "iterate": cmd_iterate,
    "adapt-eval": cmd_adapt_eval,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; status 2 is reserved for numerical failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override a config field (repeatable)")
        p.add_argument("--out", default=None, help=f"output directory (else ${OUTPUT_ENV}, "
                                                   "else the config's output_dir)")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel lower-level solves (default: number of sources)")
        if name in ("pretrain-cssl", "pretrain-ptec"):
            p.add_argument("--init", default=None, help="checkpoint to start from")
        if name == "pretrain-ptec":
            p.add_argument("--cold-start", action="store_true",
                           help="allow PTEC without a CSSL-trained initialization")
        if name == "iterate":
            p.add_argument("--rounds", type=int, required=True)
        if name == "adapt-eval":
            p.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeatable)")
    return parser


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        out = args.out or os.environ.get(OUTPUT_ENV)
        resolved = load_config(args.config, args.overrides, out)
        if args.workers is None:
            args.workers = resolved.config.workers
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](Run(resolved), args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RoundFailure as exc:
        print(f"error: {exc} ({len(exc.completed)} checkpoints kept)", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.__cause__, NumericalError) else EXIT_INVALID
    except (ConfigError, FileFormatError, PtecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
