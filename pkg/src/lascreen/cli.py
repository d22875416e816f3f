"""Command-line pipeline: synth, sample, fit, screen, oc, release.

Every command reads declared inputs, writes its outputs into ``--out`` and
adds ``manifest.json`` with SHA-256 digests of inputs and outputs.  Outputs
are staged in a temporary directory and moved into place only on success, so
a failing command leaves nothing behind.  Errors are reported as one JSON
object on stderr with a distinct exit status per error class.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .dataio import (
    read_json, read_pupils, read_schools, sha256_file, validate_membership, write_csv, write_json,
)
from .disclosure import ReleasePolicy, load_key, release
from .errors import FitError, InfeasibleBudgetError, SchemaError
from .estimator import FitOptions, FitResult, fit
from .inference import caterpillar_data, eb_residuals, intervals
from .mclab import OCConfig, choose_threshold, run_oc
from .model import LEVELS, ModelSpec, build_design, model_preset
from .plotting import CaterpillarOptions, render_caterpillar
from .sampler import SampleDesign, draw_sample
from .synthgen import ScenarioConfig, generate_population, scenario_preset

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_FIT = 3
EXIT_IO = 4
EXIT_BUDGET = 5
EXIT_INTERNAL = 1

SCENARIO_PRESETS = ("paper_full", "paper_random_slopes", "null_la", "planted")
MODEL_PRESETS = ("table1", "table2", "table3", "table4")


class Run:
    """Collects outputs in a staging directory and writes the manifest."""

    def __init__(self, args, command):
        self.args = args
        self.command = command
        self.out = Path(args.out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=self.out.parent))
        self.inputs = {}
        self.configs = []
        self.deferred = None  # error reported after outputs are committed
        self.t0 = time.perf_counter()

    def path(self, name):
        return self.stage / name

    def read(self, path):
        self.inputs[str(path)] = sha256_file(path)
        return path

    def config(self, path):
        self.configs.append(str(path))
        return self.read(path)

    def commit(self, seed=None):
        outputs = {p.name: sha256_file(p) for p in sorted(self.stage.iterdir())}
        manifest = {
            "command": self.command,
            "arguments": {k: v for k, v in sorted(vars(self.args).items())
                          if k not in ("func", "out") and v is not None},
            "config_paths": self.configs,
            "seed": seed,
            "inputs": self.inputs,
            "outputs": outputs,
            "versions": {
                "lascreen": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "pandas": pd.__version__, "python": platform.python_version(),
            },
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        write_json(manifest, self.stage / "manifest.json")
        self.out.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.stage.iterdir()):
            os.replace(p, self.out / p.name)
        self.stage.rmdir()

    def abort(self):
        shutil.rmtree(self.stage, ignore_errors=True)


def _data_file(args, name):
    path = Path(args.data) / name
    if not path.is_file():
        raise FileNotFoundError(f"required input {path} not found")
    return path


def _load_population(run, args):
    pupils = read_pupils(run.read(_data_file(args, "pupils.csv")))
    schools = read_schools(run.read(_data_file(args, "schools.csv")))
    validate_membership(pupils, schools)
    return pupils, schools


def cmd_synth(args, run):
    if args.config:
        cfg = ScenarioConfig.from_json(Path(run.config(args.config)).read_text(encoding="utf-8"))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    else:
        cfg = scenario_preset(args.preset, seed=args.seed or 0)
    pop = generate_population(cfg)
    write_csv(pop.pupils, run.path("pupils.csv"))
    write_csv(pop.schools, run.path("schools.csv"))
    write_csv(pop.truth_long(), run.path("truth.csv"))
    (run.path("scenario.json")).write_text(cfg.to_json() + "\n", encoding="utf-8")
    return cfg.seed


def cmd_sample(args, run):
    pupils, schools = _load_population(run, args)
    params = {}
    if args.config:
        params = read_json(run.config(args.config))
    kind = args.design or params.get("kind", "srs")
    design = SampleDesign(
        kind=kind,
        target_per_la=args.target if args.target is not None else params.get("target_per_la", 250),
        min_la_size=args.min_la_size if args.min_la_size is not None else params.get("min_la_size", 100),
        seed=args.seed if args.seed is not None else params.get("seed", 0),
    )
    sample = draw_sample(pupils, design)
    sample.to_csv(run.path("sample.csv"))
    run.path("sample_audit.json").write_text(sample.audit_json() + "\n", encoding="utf-8")
    write_csv(sample.pupils(pupils), run.path("pupils.csv"))
    write_csv(schools, run.path("schools.csv"))
    return design.seed


def _spec_from_args(args, run):
    if args.config:
        return ModelSpec.from_json(Path(run.config(args.config)).read_text(encoding="utf-8"))
    return model_preset(args.preset or "table1", outcome_transform=args.transform)


def cmd_fit(args, run):
    pupils, schools = _load_population(run, args)
    spec = _spec_from_args(args, run)
    design = build_design(pupils, schools, spec)
    res = fit(design, spec, FitOptions(max_iter=args.max_iter))
    if not res.converged:
        raise FitError(f"fit did not converge in {res.iterations} iterations "
                       f"(-2LL {res.minus2ll:.6f})")
    doc = res.to_dict()
    doc["spec"] = spec.to_dict()
    doc["n_dropped"] = int(design.n_dropped)
    doc["source"] = {
        "data": os.path.relpath(Path(args.data).resolve(), Path(args.out).resolve()),
        "pupils_sha256": sha256_file(_data_file(args, "pupils.csv")),
        "schools_sha256": sha256_file(_data_file(args, "schools.csv")),
    }
    write_json(doc, run.path("fit.json"))
    write_csv(res.coefficients(), run.path("coefficients.csv"))
    write_csv(res.random_table(), run.path("random.csv"))
    return None


def cmd_screen(args, run):
    fit_path = run.read(_data_file(args, "fit.json"))
    doc = read_json(fit_path)
    for key in ("spec", "source"):
        if key not in doc:
            raise SchemaError(f"{fit_path}: missing {key!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    res = FitResult.from_dict(doc)
    src = Path(os.path.normpath(Path(args.data) / doc["source"]["data"]))
    pupils_path, schools_path = src / "pupils.csv", src / "schools.csv"
    for p, key in ((pupils_path, "pupils_sha256"), (schools_path, "schools_sha256")):
        if not p.is_file():
            raise FileNotFoundError(f"fitted data {p} not found")
        if sha256_file(p) != doc["source"][key]:
            raise SchemaError(f"{p} changed since the model was fitted")
    pupils = read_pupils(run.read(pupils_path))
    schools = read_schools(run.read(schools_path))
    design = build_design(pupils, schools, spec)
    levels = LEVELS if args.level == "both" else (args.level,)
    summary = {}
    for level in levels:
        if not spec.random_terms(level):
            continue
        resid = eb_residuals(design, res, level, adjust_for_beta=args.adjust_beta)
        report = intervals(resid, args.confidence, bonferroni=args.bonferroni)
        report.to_csv(run.path(f"screening_{level}.csv"))
        summary[level] = {k: v for k, v in report.to_dict().items() if k != "units"}
        for term in report.terms:
            cat = caterpillar_data(report, term)
            write_csv(cat, run.path(f"caterpillar_{level}_{term}.csv"))
            title = f"{level.upper()} {round(args.confidence * 100, 6):g}% intervals: {term}"
            svg = render_caterpillar(cat, CaterpillarOptions(title=title))
            run.path(f"caterpillar_{level}_{term}.svg").write_text(svg, encoding="utf-8")
    write_json(summary, run.path("screening.json"))
    return None


def cmd_oc(args, run):
    if args.config:
        cfg = OCConfig.from_dict(read_json(run.config(args.config)))
    else:
        cfg = OCConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.replications is not None:
        cfg = replace(cfg, replications=args.replications)
    cfg.validate()
    oc = run_oc(cfg, threads=args.threads)
    oc.to_csv(run.path("oc.csv"))
    write_csv(oc.runs, run.path("oc_runs.csv"))
    doc = json.loads(oc.to_json())
    if args.budget is not None:
        try:
            n, c = choose_threshold(oc, budget=args.budget)
            doc["recommendation"] = {"n": n, "confidence": c, "budget": args.budget}
        except InfeasibleBudgetError as exc:
            # the OC table is still valid and expensive, so keep it and fail afterwards
            doc["recommendation"] = {"error": str(exc), "min_expected_flags": exc.min_expected_flags}
            run.deferred = exc
    write_json(doc, run.path("oc.json"))
    return cfg.seed


def cmd_release(args, run):
    pupils, schools = _load_population(run, args)
    if args.key_file:
        run.config(args.key_file)
    policy = ReleasePolicy(load_key(args.key_file), suppress_threshold=args.threshold)
    p, s, n_sup = release(pupils, schools, policy)
    write_csv(p, run.path("pupils.csv"))
    write_csv(s, run.path("schools.csv"))
    write_json({"suppress_threshold": policy.suppress_threshold, "schools_suppressed": n_sup,
                "rows_suppressed": int(p["suppressed"].sum()), "rows": int(len(p))},
               run.path("release_audit.json"))
    return None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lascreen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lascreen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--threads", type=int, default=1, help="worker cap (results do not change)")
        if data:
            p.add_argument("--data", required=True, help="input directory")

    p = sub.add_parser("synth", help="generate a synthetic population")
    common(p, data=False)
    p.add_argument("--preset", choices=SCENARIO_PRESETS, default="paper_full")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="draw a per-LA sample")
    common(p)
    p.add_argument("--design", choices=("srs", "equal"))
    p.add_argument("--target", type=int)
    p.add_argument("--min-la-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="fit the three-level model")
    common(p)
    p.add_argument("--preset", choices=MODEL_PRESETS)
    p.add_argument("--transform", choices=("zscore", "rank", "none"), default="zscore")
    p.add_argument("--max-iter", type=int, default=200)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("screen", help="EB residuals, intervals and caterpillar plots")
    common(p)
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--level", choices=("la", "school", "both"), default="la")
    p.add_argument("--bonferroni", action="store_true")
    p.add_argument("--adjust-beta", action="store_true",
                   help="include fixed-effect uncertainty in comparative variances")
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("oc", help="Monte Carlo operating characteristics")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--budget", type=float, help="max expected flags for the recommendation")
    p.set_defaults(func=cmd_oc)

    p = sub.add_parser("release", help="pseudonymize and suppress for release")
    common(p)
    p.add_argument("--key-file", help=f"file holding the key (default: ${'{'}LASCREEN_RELEASE_KEY{'}'})")
    p.add_argument("--threshold", type=int, default=10)
    p.set_defaults(func=cmd_release)
    return parser


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(EXIT_SCHEMA, "schema", "--threads must be at least 1")
    run = None
    try:
        run = Run(args, args.command)
        seed = args.func(args, run)
        run.commit(seed)
        if isinstance(run.deferred, InfeasibleBudgetError):
            return _fail(EXIT_BUDGET, "budget", run.deferred)
        return EXIT_OK
    except InfeasibleBudgetError as exc:
        code, kind, msg = EXIT_BUDGET, "budget", exc
    except (SchemaError, ValueError, KeyError) as exc:
        code, kind, msg = EXIT_SCHEMA, "schema", exc
    except FitError as exc:
        code, kind, msg = EXIT_FIT, "fit", exc
    except OSError as exc:
        code, kind, msg = EXIT_IO, "io", exc
    if run is not None:
        run.abort()
    return _fail(code, kind, msg)


if __name__ == "__main__":
    sys.exit(main())
