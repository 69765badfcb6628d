"""Command line: ``prescribed-sde validate|resolvent|simulate|report``.

Exit codes: 0 every executed check passed, 1 a check failed, 2 usage or
configuration error. Each run writes a JSON report and a manifest listing
every artifact; ``--manifest`` re-runs a command from such a manifest.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from . import runner
from .errors import ConfigParse, PrescribedSDEError, UnknownScenario
from .report import ReportEntry, ValidationReport
from .scenarios import load_scenario

OUT_ENV = "PRESCRIBED_SDE_OUT"
EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from None


def build_parser():
    p = _Parser(prog="prescribed-sde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("scenario_arg", nargs="*", metavar="SCENARIO",
                        help="registered name, optionally followed by key=value parameters")
        sp.add_argument("--scenario", help="same as the positional SCENARIO")
        sp.add_argument("--config", help="TOML scenario configuration file")
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./prescribed_sde_out)")
        sp.add_argument("--tolerance-scale", type=float, default=1.0,
                        help="multiply every check tolerance by this factor")
        sp.add_argument("--manifest", help="re-run with the options stored in a manifest")

    common(sub.add_parser("validate", help="analytic checks of the coefficients"))
    r = sub.add_parser("resolvent", help="discrete resolvents on nested boxes")
    common(r)
    r.add_argument("--alpha", type=float)
    r.add_argument("--boxes", type=_floats, help="box half-widths, e.g. '1,2,3,4'")
    r.add_argument("--nodes-per-unit", type=int, dest="n")
    s = sub.add_parser("simulate", help="tamed Euler-Maruyama paths and statistical tests")
    common(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--paths", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--horizon", type=float, dest="T")
    s.add_argument("--test", action="append", dest="tests", choices=runner.SIM_TESTS,
                   help="test to run (repeatable; default depends on the scenario)")
    s.add_argument("--record-stride", type=int)
    rp = sub.add_parser("report", help="merge the reports listed in one or more manifests")
    rp.add_argument("manifests", nargs="+")
    rp.add_argument("--out-dir")
    return p


def _out_dir(args):
    d = args.out_dir or os.environ.get(OUT_ENV) or "prescribed_sde_out"
    os.makedirs(d, exist_ok=True)
    return d


def _scenario(args):
    positional = " ".join(args.scenario_arg or [])
    chosen = [v for v in (positional, args.scenario, args.config) if v]
    if len(chosen) != 1:
        raise UsageError("give exactly one of SCENARIO, --scenario or --config")
    return load_scenario(chosen[0])


def _options(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _apply_manifest(args):
    with open(args.manifest) as fh:
        man = json.load(fh)
    if man.get("command") != args.command:
        raise UsageError(f"manifest is for {man.get('command')!r}, not {args.command!r}")
    spec = man["scenario"]
    args.config = spec.get("config_path")
    args.scenario = None if args.config else " ".join(
        [spec["name"]] + [f"{k}={v}" for k, v in spec["params"].items()])
    args.scenario_arg = None
    for k, v in man.get("options", {}).items():
        setattr(args, k, v)
    args.tolerance_scale = man.get("tolerance_scale", 1.0)


def _write(rep: ValidationReport, out_dir, stem, args, sc, options, files, t0):
    report_path = os.path.join(out_dir, f"{stem}-report.json")
    rep.write(report_path)
    manifest = {
        "command": args.command,
        "scenario": {"name": sc.name, "params": sc.params, "config_path": sc.config_path},
        "options": options,
        "tolerance_scale": args.tolerance_scale,
        "tolerances": {e.check_id: e.tolerance for e in rep},
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_clock_s": round(time.time() - t0, 3),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(t0)),
        "outputs": [report_path] + list(files),
    }
    man_path = os.path.join(out_dir, f"{stem}-manifest.json")
    manifest["outputs"].append(man_path)
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
        fh.write("\n")
    return report_path, man_path


def _summarize(rep, stream):
    for e in rep:
        stream.write(f"{e.status:>4}  {e.check_id:<34} metric {e.metric:.3e}  tol {e.tolerance:.1e}\n")
    c = rep.counts()
    stream.write(f"{c['pass']} passed, {c['fail']} failed, {c['warn']} warnings\n")


def cmd_validate(args, out=None):
    out = out or sys.stdout
    t0 = time.time()
    sc = _scenario(args)
    rep = runner.validation_report(sc, args.tolerance_scale)
    paths = _write(rep, _out_dir(args), f"validate-{sc.name}", args, sc, {}, [], t0)
    _summarize(rep, out)
    out.write(f"report: {paths[0]}\n")
    return rep


def cmd_resolvent(args, out=None):
    out = out or sys.stdout
    t0 = time.time()
    sc = _scenario(args)
    opts = _options(args, ("alpha", "boxes", "n"))
    d = _out_dir(args)
    rep, files = runner.resolvent_report(sc, opts, args.tolerance_scale, d)
    paths = _write(rep, d, f"resolvent-{sc.name}", args, sc, opts, files, t0)
    _summarize(rep, out)
    out.write(f"report: {paths[0]}\n")
    return rep


def cmd_simulate(args, out=None):
    out = out or sys.stdout
    t0 = time.time()
    sc = _scenario(args)
    opts = _options(args, ("paths", "dt", "T", "seed", "tests"))
    if getattr(args, "record_stride", None) is not None:
        opts["record_stride"] = args.record_stride
    d = _out_dir(args)
    rep, files = runner.simulate_report(sc, opts, args.tolerance_scale, d)
    paths = _write(rep, d, f"simulate-{sc.name}", args, sc, opts, files, t0)
    _summarize(rep, out)
    out.write(f"report: {paths[0]}\n")
    return rep


def cmd_report(args, out=None):
    out = out or sys.stdout
    merged = ValidationReport(meta={"sources": []})
    for path in args.manifests:
        with open(path) as fh:
            man = json.load(fh)
        src = man["outputs"][0]
        with open(src) as fh:
            part = ValidationReport.from_dict(json.load(fh))
        tag = f"{man['command']}:{man['scenario']['name']}"
        for e in part:
            merged.add(ReportEntry(f"{tag}/{e.check_id}", e.metric, e.tolerance, e.details,
                                   "warn" if e.status == "warn" else "", e.data))
        merged.psi_floor_activations += part.psi_floor_activations
        merged.meta["sources"].append({"manifest": os.path.abspath(path), "report": src})
    d = _out_dir(args)
    target = os.path.join(d, "consolidated-report.json")
    merged.write(target)
    _summarize(merged, out)
    out.write(f"report: {target}\n")
    return merged


COMMANDS = {"validate": cmd_validate, "resolvent": cmd_resolvent, "simulate": cmd_simulate,
            "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "manifest", None):
            _apply_manifest(args)
        rep = COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"prescribed-sde: usage error: {exc}\n")
        return EXIT_USAGE
    except (UnknownScenario, ConfigParse) as exc:
        sys.stderr.write(f"prescribed-sde: {type(exc).__name__}: {exc}\n")
        return EXIT_USAGE
    except PrescribedSDEError as exc:
        # a numerical failure inside a check counts as a failed check
        sys.stderr.write(f"prescribed-sde: check aborted: {type(exc).__name__}: {exc}\n")
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"prescribed-sde: error: {exc}\n")
        return EXIT_USAGE
    return EXIT_PASS if rep.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
