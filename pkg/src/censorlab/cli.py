"""Command line entry point: ``censorlab run | report | make-synth | probe``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import synthdata as sd
from .model import ConfigError
from .rng import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("censorlab")


def _cmd_run(args) -> int:
    from .experiment import (ExperimentConfig, expected_rows, load_dataset, resolve_output_dir,
                             run_experiment, split_metadata)
    from .io import ResultSink
    from .report import emit_report

    config = ExperimentConfig.load(args.config).validate()
    out = resolve_output_dir(config, args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")
    (out / "splits.json").write_text(json.dumps(split_metadata(config, data), indent=2) + "\n",
                                     encoding="utf-8")
    sink = ResultSink(out / "results.csv")
    total = expected_rows(config)

    def progress(row):
        log.info("[%d/%d] %s %s lambda=%g seed=%d fold=%d test_ba=%.4f %s", row.run_id + 1, total,
                 row.censor_method, row.censor_mode, row.lam, row.seed, row.fold, row.test_ba,
                 row.status)

    rows = run_experiment(config, sink=sink, data=data, progress=progress)
    emit_report(rows, out)
    failed = sum(r.status != "ok" for r in rows)
    print(f"{len(rows)} runs written to {out / 'results.csv'} ({failed} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


def _cmd_report(args) -> int:
    from .io import read_results
    from .report import emit_report

    rows = read_results(args.results)
    paths = emit_report(rows, args.out)
    print(f"summary: {paths['summary']}")
    for p in paths["figures"]:
        print(f"figure: {p}")
    return EXIT_PARTIAL if any(r["status"] != "ok" for r in rows) else EXIT_OK


def _cmd_make_synth(args) -> int:
    from .io import write_epoch_file

    raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    per_subject = int(raw.pop("trials_per_subject", args.trials_per_subject))
    seed = int(raw.pop("data_seed", args.seed))
    spec = sd.GenModelSpec.from_dict(raw)
    gen = sd.generate(spec, per_subject * spec.n_nuisance, RngStream(seed).derive("dataset"),
                      balanced=True)
    write_epoch_file(args.out, gen.batch)
    print(f"wrote {len(gen.batch)} trials to {args.out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .io import read_checkpoint, read_epoch_file
    from .stats import probe_subject_accuracy
    from .trainer import Trainer

    trainer = Trainer.from_checkpoint(read_checkpoint(args.checkpoint))
    data = read_epoch_file(args.data).reindex_nuisance()
    z = trainer.model.features(data.x)
    out = {"probe_ba": probe_subject_accuracy(z, data.s, RngStream(args.seed).derive("probe")),
           "task_ba": trainer.evaluate(data), "n_trials": len(data),
           "n_nuisance": int(data.n_nuisance)}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="censorlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every finished run")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a cross-validated sweep from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (overrides $CENSORLAB_OUTPUT_DIR and the config)")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="summary table and boxplots from a results CSV")
    rep.add_argument("--results", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=_cmd_report)

    m = sub.add_parser("make-synth", help="sample a synthetic dataset into an epoch file")
    m.add_argument("--spec", required=True, help="JSON generative-model spec")
    m.add_argument("--out", required=True)
    m.add_argument("--trials-per-subject", type=int, default=200)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=_cmd_make_synth)

    pr = sub.add_parser("probe", help="subject-probe accuracy of a checkpoint's features")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=_cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, sd.SpecError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        # malformed input files are configuration problems from the caller's side
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
