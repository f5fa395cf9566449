"""Command line interface.

Every subcommand accepts ``--config FILE`` (a JSON object with the same keys
as the long flags, dashes replaced by underscores); flags given on the
command line win over the file.  Exit codes: 0 success, 1 failed checks,
2 configuration error, 3 error inside a stage.  Errors are reported on
stderr as one JSON object with the stage name.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from . import markov as mk
from . import metastable as ms
from . import pipeline as pl
from . import poincare as pc
from . import verify as vf
from .errors import RandPoincareError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def parse_cells(text, K):
    """Cell set from ``"a:b"`` label ranges, ``"3,7"`` lists or a chart
    interval ``"x=lo..hi"`` (cells whose centers lie in ``[lo, hi]``)."""
    text = text.strip()
    if text.startswith("x="):
        try:
            lo, hi = (float(v) for v in text[2:].split(".."))
        except ValueError as exc:
            raise pl.ConfigError(f"bad chart interval {text!r}") from exc
        c = K.centers()[:, 0]
        out = K.cells[(c >= lo) & (c <= hi)]
    else:
        labels = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            try:
                if ":" in part:
                    a, b = part.split(":")
                    labels.extend(range(int(a), int(b)))
                else:
                    labels.append(int(part))
            except ValueError as exc:
                raise pl.ConfigError(f"bad cell set {text!r}") from exc
        out = np.array(labels, dtype=np.int64)
    out = np.intersect1d(out, K.cells)
    if out.size == 0:
        raise pl.ConfigError(f"cell set {text!r} selects no cells of the kernel")
    return out


def _load_kernel(path):
    if not path:
        raise pl.ConfigError("--kernel is required")
    if not os.path.isfile(path):
        raise pl.ConfigError(f"kernel file {path!r} not found")
    try:
        return pc.load_kernel(path)
    except (ValueError, KeyError) as exc:
        raise pl.ConfigError(f"cannot read kernel file {path!r}: {exc}") from exc


def _settings(args, keys, defaults):
    """Merge defaults, the config file and explicit flags."""
    data = dict(defaults)
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise pl.ConfigError(f"config file {args.config!r} not found")
        try:
            with open(args.config) as fh:
                data.update({k: v for k, v in json.load(fh).items() if k in keys})
        except json.JSONDecodeError as exc:
            raise pl.ConfigError(f"config file is not valid JSON: {exc}") from exc
    data.update({k: getattr(args, k) for k in keys if getattr(args, k, None) is not None})
    return data


def _pipeline_config(args):
    keys = [f.name for f in dataclasses.fields(pl.PipelineConfig)]
    over = {k: getattr(args, k, None) for k in keys}
    return pl.PipelineConfig.from_sources(args.config, over)


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _print(obj):
    print(json.dumps(pl._jsonable(obj), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_orbits(args):
    cfg = _pipeline_config(args)
    out = _outdir(cfg.out)
    model = pl.load_model(cfg.model)
    orbits, stable = pl.stage_orbits(cfg, model, out)
    _print({"orbits": [{"anchor": o.chart_point, "period": o.period, "stable": o.stable,
                        "multipliers": o.multipliers} for o in orbits]})
    return EXIT_OK


def cmd_kernel(args):
    cfg = _pipeline_config(args)
    out = _outdir(cfg.out)
    model = pl.load_model(cfg.model)
    for s2 in cfg.sigma2:
        K, _ = pl.stage_kernel(cfg, model, s2, out)
        print(f"wrote kernel_{pl.tag(s2)}.json ({K.size} cells)")
    return EXIT_OK


def cmd_spectrum(args):
    s = _settings(args, ["kernel", "count", "out"], {"count": 10, "out": "."})
    K = _load_kernel(s["kernel"])
    out = _outdir(s["out"])
    with pl._stage("spectra"):
        vals = np.linalg.eigvals(K.matrix)
        vals = vals[np.argsort(-np.abs(vals), kind="stable")][:int(s["count"])]
        pl.write_spectrum_csv(os.path.join(out, "spectrum.csv"), vals)
    print(f"wrote spectrum.csv ({len(vals)} eigenvalues)")
    return EXIT_OK


def cmd_committor(args):
    s = _settings(args, ["kernel", "set_a", "set_b", "out"], {"out": "."})
    K = _load_kernel(s["kernel"])
    if s.get("set_a") is None or s.get("set_b") is None:
        raise pl.ConfigError("--set-a and --set-b are required")
    A, B = parse_cells(s["set_a"], K), parse_cells(s["set_b"], K)
    out = _outdir(s["out"])
    with pl._stage("committor"):
        h = mk.committor(K, A, B)
        pl.write_vectors_csv(os.path.join(out, "committor.csv"), K, {"committor": h})
    print("wrote committor.csv")
    return EXIT_OK


def cmd_qsd(args):
    s = _settings(args, ["kernel", "set_a", "out"], {"out": "."})
    K = _load_kernel(s["kernel"])
    if s.get("set_a") is None:
        raise pl.ConfigError("--set-a is required")
    A = parse_cells(s["set_a"], K)
    out = _outdir(s["out"])
    with pl._stage("qsd"):
        KA = mk.kill(K, A)
        q = mk.qsd(KA)
        pl.write_vectors_csv(os.path.join(out, "qsd.csv"), KA, {"pi": q.pi, "phi": q.phi})
    _print({"lambda0": q.lambda0, "residual": q.residual, "iterations": q.iterations})
    return EXIT_OK


def cmd_hierarchy(args):
    s = _settings(args, ["H", "model"], {"model": None})
    if s.get("H") is not None:
        H = s["H"]
        if isinstance(H, str):
            try:
                H = json.loads(open(H).read() if os.path.isfile(H) else H)
            except json.JSONDecodeError as exc:
                raise pl.ConfigError(f"bad exponent matrix: {exc}") from exc
        H = np.array([[np.inf if v is None else v for v in row] for row in H], dtype=float)
        np.fill_diagonal(H, np.inf)
    elif s.get("model") is not None:
        model = pl.load_model(s["model"])
        with pl._stage("orbits"):
            stable = [o.chart_point for o in pl.find_orbits(model) if o.stable]
        H, _ = pl.exponents_for(model, stable, pl.PipelineConfig())
    else:
        raise pl.ConfigError("give --H or --model")
    with pl._stage("hierarchy"):
        order, theta = ms.hierarchy_order(H)
    _print({"order": list(order), "theta": theta, "H": H})
    return EXIT_OK


def cmd_verify(args):
    s = _settings(args, ["kernel", "suite", "structure", "model", "delta", "out"],
                  {"suite": "exact", "delta": 0.2, "out": "."})
    K = _load_kernel(s["kernel"])
    if s["suite"] not in ("exact", "theorems", "certificates", "all"):
        raise pl.ConfigError(f"unknown suite {s['suite']!r}")
    st = None
    if s.get("structure"):
        if not os.path.isfile(s["structure"]):
            raise pl.ConfigError(f"structure file {s['structure']!r} not found")
        with open(s["structure"]) as fh:
            st = ms.MetastableStructure.from_dict(json.load(fh))
    elif s["suite"] != "exact" or s.get("model"):
        model = pl.load_model(s.get("model") or "reference", sigma=K.sigma)
        cfg = pl.PipelineConfig(delta=float(s["delta"]))
        _, stable = pl.stage_orbits(cfg, model, _outdir(s["out"]))
        st = pl.stage_structure(cfg, K, model, stable, _outdir(s["out"]), K.sigma ** 2)
    checks = list(pl.CHECKS[1:]) + ["exact"] if s["suite"] == "all" else [s["suite"]]
    cfg = pl.PipelineConfig(checks=checks)
    if s["suite"] == "exact" and st is None:
        with pl._stage("verify"):
            ex = vf.exact_identities(K)
        report = {"exact": {k: {"error": e, "tolerance": t, "pass": bool(e <= t)}
                            for k, (e, t) in ex.items()}}
        hard = [k for k, v in report["exact"].items() if not v["pass"]]
        soft = []
        pl.write_json(os.path.join(_outdir(s["out"]), "report_exact.json"), report)
    else:
        report, hard, soft = pl.stage_checks(cfg, K, st, _outdir(s["out"]), K.sigma ** 2)
    failed = hard if s["suite"] == "exact" else hard + soft
    for name in failed:
        print(f"FAIL {name}")
    print("verify: " + ("FAIL" if failed else "PASS"))
    return EXIT_FAILED if failed else EXIT_OK


def cmd_analyze(args):
    cfg = _pipeline_config(args)
    status, summary = pl.run_pipeline(cfg, log=lambda m: print(m, file=sys.stderr))
    for name in summary["hard_failures"]:
        print(f"FAIL {name}")
    for name in summary["soft_failures"]:
        print(f"{'FAIL' if cfg.strict else 'note'} {name}")
    if "exponent" in summary:
        e = summary["exponent"]
        print(f"fitted H = {e['H']:.6g} (analytic {e['analytic']:.6g})")
    print(f"analyze: {'PASS' if status == 0 else 'FAIL'}; artifacts in {cfg.out}")
    return status


# ---------------------------------------------------------------------------
# parser


def _pipeline_flags(p):
    p.add_argument("--model", help='"reference" or a JSON model file')
    p.add_argument("--sigma2", type=float, nargs="+", help="noise variances sigma^2")
    p.add_argument("--cells", type=int, help="grid cells per chart axis")
    p.add_argument("--samples-per-cell", dest="samples_per_cell", type=int)
    p.add_argument("--dt", type=float, help="Euler step")
    p.add_argument("--seed", type=int)
    p.add_argument("--delta", type=float, help="ball radius")
    p.add_argument("--max-time", dest="max_time", type=float)
    p.add_argument("--checks", nargs="+", choices=pl.CHECKS)
    p.add_argument("--strict", action="store_true", default=None,
                   help="count asymptotic and certificate checks in the exit status")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="randpoincare",
        description="Random Poincare maps of noisy oscillators: kernels, spectra, checks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with default settings")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker cap for kernel estimation")
        p.set_defaults(func=func)
        return p

    _pipeline_flags(add("orbits", cmd_orbits, "periodic orbits and Floquet multipliers"))
    _pipeline_flags(add("kernel", cmd_kernel, "estimate the discretized kernel"))
    _pipeline_flags(add("analyze", cmd_analyze, "full pipeline"))
    p = add("spectrum", cmd_spectrum, "leading eigenvalues of a kernel")
    p.add_argument("--kernel")
    p.add_argument("--count", type=int)
    for name, func, text, both in (("committor", cmd_committor, "committor P(tau_A < tau_B)", True),
                                   ("qsd", cmd_qsd, "quasistationary distribution on a set", False)):
        p = add(name, func, text)
        p.add_argument("--kernel")
        p.add_argument("--set-a", dest="set_a", help='cells, e.g. "40:72" or "x=0.8..1.2"')
        if both:
            p.add_argument("--set-b", dest="set_b")
    p = add("hierarchy", cmd_hierarchy, "metastable order of an exponent matrix")
    p.add_argument("--H", help="JSON matrix (null on the diagonal) or file")
    p.add_argument("--model")
    p = add("verify", cmd_verify, "run a check suite on a kernel")
    p.add_argument("--kernel")
    p.add_argument("--suite", choices=["exact", "theorems", "certificates", "all"])
    p.add_argument("--structure", help="structure JSON written by analyze")
    p.add_argument("--model")
    p.add_argument("--delta", type=float)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(json.dumps({"stage": "config", "error": "ConfigError", "message": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(json.dumps({"stage": exc.stage, "error": type(exc.cause).__name__,
                          "message": str(exc.cause)}), file=sys.stderr)
        return EXIT_STAGE
    except RandPoincareError as exc:
        print(json.dumps({"stage": "unknown", "error": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
