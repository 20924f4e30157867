"""Command-line entry point: ``cohort-phenotyper <command> [options]``.

Exit codes: 0 success, 2 validation error, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .cohort import write_cohort
from .errors import PhenotyperError, StageFailed, ValidationError
from .pipeline import STAGES, PipelineConfig, run_pipeline, write_json, write_summary
from .synth import SynthConfig, generate_cohort, reference_config

# each stage command runs the pipeline through this stage
_UNTIL = {"preprocess": "preprocess", "rank": "rank", "fit": "fit", "embed": "embed",
          "cluster": "phenotype", "run": None}


def _k_value(text: str):
    return text if text == "auto" else int(text)


def _k_range(text: str) -> list[int]:
    lo, _, hi = text.partition("..")
    return [int(lo), int(hi or lo)]


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohort-phenotyper",
                                     description="Longitudinal cohort phenotyping toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    sub.add_parser("synth", parents=[common], help="simulate a planted-truth cohort")

    stage = argparse.ArgumentParser(add_help=False, parents=[common])
    stage.add_argument("--cohort", help="cohort CSV (long format)")
    stage.add_argument("--schema", help="feature schema JSON")
    stage.add_argument("--threads", type=int, dest="n_jobs")
    stage.add_argument("--impute-k", type=int)
    stage.add_argument("--outlier-alpha", type=float)
    stage.add_argument("--smote-percent", type=int)
    stage.add_argument("--smote-classes", choices=("minority", "both"))
    stage.add_argument("--quadratic", type=_csv_list, help="f1,f2,...")
    stage.add_argument("--n-top", type=int)
    stage.add_argument("--n-trees", type=int)
    stage.add_argument("--model", choices=("lgmm", "lr", "both"))
    stage.add_argument("--visit", type=int)
    stage.add_argument("--quad-points", type=int)
    stage.add_argument("--features", type=json.loads, help='JSON list, e.g. \'["age","ldl"]\'')
    stage.add_argument("--perplexity", type=float)
    stage.add_argument("--k", type=_k_value, help="auto or a component count")
    stage.add_argument("--k-range", type=_k_range, help="low..high, e.g. 1..6")
    stage.add_argument("--no-plots", action="store_true")
    for name in STAGES[:5]:
        sub.add_parser(name, parents=[stage], help=f"run the pipeline through '{_UNTIL[name]}'")
    sub.add_parser("run", parents=[stage], help="run every stage and write the summary")
    sub.add_parser("report", parents=[common], help="rebuild summary.md of a finished run")
    return parser


_FLAG_KEYS = ("n_jobs", "impute_k", "outlier_alpha", "smote_percent", "smote_classes", "quadratic",
              "n_top", "n_trees", "model", "visit", "quad_points", "features", "k", "k_range")


def pipeline_config(args) -> PipelineConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(d, dict):
        raise ValidationError("config must be a JSON object")
    if args.cohort or args.schema:
        d.update(cohort_csv=args.cohort, schema_json=args.schema)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out:
        d["out_dir"] = args.out
    for key in _FLAG_KEYS:
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.perplexity is not None:
        d["tsne"] = {**d.get("tsne", {}), "perplexity": args.perplexity}
    if args.no_plots:
        d["plots"] = False
    return PipelineConfig.from_dict(d)


def _synth(args) -> None:
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if args.seed is not None:
            d["seed"] = args.seed
        config = SynthConfig.from_dict(d)
    else:
        config = reference_config(2024 if args.seed is None else args.seed)
    out = Path(args.out or "cohort")
    out.mkdir(parents=True, exist_ok=True)
    try:
        cohort, truth = generate_cohort(config)
    except ValidationError:
        raise
    except PhenotyperError as exc:
        raise StageFailed("synth", exc) from exc
    write_cohort(cohort, out / "cohort.csv", out / "schema.json")
    write_json(truth.to_dict(), out / "truth.json")
    write_json(config.to_dict(), out / "synth_config.json")
    print(f"wrote {len(cohort)} rows for {config.n_subjects} subjects to {out}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            _synth(args)
        elif args.command == "report":
            print(write_summary(Path(args.out or "report")))
        else:
            config = pipeline_config(args)
            result = run_pipeline(config, until=_UNTIL[args.command])
            print(f"{args.command}: wrote {result.out_dir} "
                  f"(payload {result.manifest['payload_sha256'][:12]})")
    except StageFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
