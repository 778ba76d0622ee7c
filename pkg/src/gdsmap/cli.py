"""Command-line front end.

Commands: ``classify``, ``reduce``, ``verify``, ``destabilize`` and
``sample-badset``.  Every command reads one JSON document and writes one
report.  JSON is the source of truth; ``--format text`` renders the same
data.  Flags fall back to ``GDSMAP_*`` environment variables, then to the
defaults below.

Exit status: 0 success, 1 bad-set / none-indicator / failed check,
2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import (
    BadSet,
    DegenerateKernel,
    DimensionMismatch,
    GDSError,
    InvalidInstance,
    RankMismatch,
    SelfCheckFailure,
    SingularA1,
    WrongBranch,
)
from .gds import EPS_RANK, ProblemInstance, instance_from_dict
from .instability import certify_witness, find_unstable_perturbation, psi_map
from .polymap import DiffeoChain, PolyMap, apply_chains
from .reduction import (
    BADSET,
    DET_EPS,
    INCLUSION,
    NF_TOL,
    UMBRELLA,
    badset_certificate,
    classify,
    inclusion_normal_form,
    umbrella_normal_form,
)
from .verify import (
    SINGULAR_TOL,
    SampleSpec,
    check_map_equality,
    check_roundtrip,
    find_singular_point,
    min_relative_singular_value,
)

ENV_PREFIX = "GDSMAP_"
COMMANDS = ("classify", "reduce", "verify", "destabilize", "sample-badset")

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_INVALID = 2

# flag name -> (type, default)
OPTIONS = {
    "input": (str, "-"),
    "seed": (int, 0),
    "tol": (float, NF_TOL),
    "samples": (int, 1000),
    "format": (str, "json"),
    "eps_rank": (float, EPS_RANK),
    "eps_det": (float, DET_EPS),
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    input: str = "-"
    seed: int = 0
    tol: float = NF_TOL
    samples: int = 1000
    format: str = "json"
    eps_rank: float = EPS_RANK
    eps_det: float = DET_EPS

    @property
    def spec(self) -> SampleSpec:
        return SampleSpec(count=self.samples, seed=self.seed)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "tol": self.tol,
            "samples": self.samples,
            "eps_rank": self.eps_rank,
            "eps_det": self.eps_det,
        }


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gdsmap",
        description="Normal forms and instability witnesses for generalized distance-squared mappings.",
        epilog=f"Every flag may also be set through an environment variable {ENV_PREFIX}<FLAG>, "
               f"e.g. {ENV_PREFIX}SEED or {ENV_PREFIX}EPS_RANK; command-line flags win.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "classify": "reduce the instance and report its normal form and bad-set certificate",
        "reduce": "full reduction result: transform chains, trace and residual",
        "verify": "re-check a report written by 'reduce'",
        "destabilize": "search a perturbation of the last rows making the linear part vanish",
        "sample-badset": "certificate verdicts over random centers",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--input", help="JSON file, '-' for stdin (default: -)")
        p.add_argument("--seed", type=int, help="seed for random centers and sampling (default: 0)")
        p.add_argument("--tol", type=float, help=f"normal-form tolerance (default: {NF_TOL:g})")
        p.add_argument("--samples", type=int, help="sample count (default: 1000)")
        p.add_argument("--format", choices=("json", "text"), help="report format (default: json)")
        p.add_argument("--eps-rank", dest="eps_rank", type=float, help=f"rank threshold (default: {EPS_RANK:g})")
        p.add_argument("--eps-det", dest="eps_det", type=float, help=f"bad-set threshold (default: {DET_EPS:g})")
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {}
    for name, (kind, default) in OPTIONS.items():
        value = getattr(args, name, None)
        if value is None:
            raw = environ.get(ENV_PREFIX + name.upper())
            if raw is not None:
                try:
                    value = kind(raw)
                except ValueError as exc:
                    raise UsageError(f"bad value for {ENV_PREFIX}{name.upper()}: {raw!r}") from exc
        values[name] = default if value is None else value
    if values["format"] not in ("json", "text"):
        raise UsageError(f"unknown format {values['format']!r}")
    if values["samples"] < 1:
        raise UsageError("--samples must be >= 1")
    for name in ("tol", "eps_rank", "eps_det"):
        if not values[name] > 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    return RunConfig(args.command, **values)


# ------------------------------------------------------------------ reports


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def render_text(report: dict) -> str:
    lines = []
    for key in sorted(report):
        value = _clean(report[key])
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True, separators=(",", ":"))
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def read_document(path: str) -> dict:
    try:
        if path == "-":
            text = sys.stdin.read()
        else:
            with open(path) as fh:
                text = fh.read()
    except OSError as exc:
        raise InvalidInstance(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInstance(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidInstance("input must be a JSON object")
    return data


def _centers_rng(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 1])


def _load_instance(data: dict, cfg: RunConfig) -> ProblemInstance:
    return instance_from_dict(data, _centers_rng(cfg))


# ----------------------------------------------------------------- commands


def cmd_classify(data: dict, cfg: RunConfig, full: bool = False):
    inst = _load_instance(data, cfg)
    cls = classify(inst, eps=cfg.eps_det, eps_rank=cfg.eps_rank, tol=cfg.tol)
    report = {"instance": inst.to_dict(), "kind": cls.kind, "branch": cls.branch, "rank": cls.rank,
              "certificate": cls.certificate.to_dict()}
    if cls.result is not None:
        report["residual"] = cls.result.residual
        if full:
            report["result"] = cls.result.to_dict()
    if cls.kind == BADSET:
        report["status"] = "bad-set"
        return report, EXIT_NEGATIVE
    report["status"] = "ok"
    return report, EXIT_OK


def cmd_reduce(data: dict, cfg: RunConfig):
    return cmd_classify(data, cfg, full=True)


def _declared_normal_form(kind: str, n: int, k: int) -> PolyMap:
    if kind == UMBRELLA:
        return umbrella_normal_form(n)
    if kind == INCLUSION:
        return inclusion_normal_form(n, k)
    raise InvalidInstance(f"cannot verify a result of kind {kind!r}")


def cmd_verify(data: dict, cfg: RunConfig):
    result = data.get("result")
    if not isinstance(result, dict):
        raise InvalidInstance("verify expects the JSON written by 'reduce' (no 'result' field)")
    try:
        inst = instance_from_dict(result["instance"])
        source = DiffeoChain.from_dict(result["source_chain"])
        target = DiffeoChain.from_dict(result["target_chain"])
        stored_nf = PolyMap.from_dict(result["normal_form"])
        kind = result["kind"]
        order = result.get("order") or None
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInstance(f"malformed reduction result: {exc}") from exc
    nf = _declared_normal_form(kind, inst.n, inst.k)
    G = inst.gds()
    reduced = apply_chains(target, G, source, order)
    residual = reduced.coefficient_distance(nf) / G.max_abs_coefficient()
    checks, details = {}, {}
    checks["normal_form_declared"] = stored_nf == nf
    details["residual"] = residual
    checks["residual"] = residual <= cfg.tol
    eq = check_map_equality(reduced, nf, cfg.spec, cfg.tol)
    details["sampled_equality"] = eq.to_dict()
    checks["sampled_equality"] = eq.equal
    roundtrips = [check_roundtrip(t, cfg.spec).to_dict() for t in list(target.transforms) + list(source.transforms)]
    details["roundtrips"] = roundtrips
    checks["roundtrips"] = all(r["ok"] for r in roundtrips)
    if kind == UMBRELLA:
        sp = find_singular_point(reduced, cfg.spec, SINGULAR_TOL)
        details["singular_point"] = sp.to_dict()
        checks["dichotomy"] = sp.found
    else:
        ratio = min_relative_singular_value(reduced, cfg.spec)
        details["min_relative_singular_value"] = ratio
        checks["dichotomy"] = ratio > SINGULAR_TOL
    cert = badset_certificate(inst, "fullrank" if kind == UMBRELLA else "deficient", cfg.eps_det, cfg.eps_rank)
    details["certificate"] = cert.to_dict()
    checks["certificate"] = cert.outside
    passed = all(checks.values())
    report = {"instance": inst.to_dict(), "kind": kind, "checks": checks, "details": details,
              "passed": passed, "status": "ok" if passed else "failed"}
    return report, EXIT_OK if passed else EXIT_NEGATIVE


def cmd_destabilize(data: dict, cfg: RunConfig):
    if "q" in data and "c" in data:
        try:
            n, k = int(data["n"]), int(data["k"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInstance(f"instance needs integer 'n' and 'k': {exc}") from exc
        A = instance_from_dict({**data, "p": np.zeros((k + 1, n + 1)).tolist()}).A
        p = psi_map(data["q"], data["c"], A[: n + 1])
        inst = ProblemInstance(A, p)
        origin = "psi"
    else:
        inst = _load_instance(data, cfg)
        origin = "input" if data.get("p") is not None else "random"
    rep = find_unstable_perturbation(inst.p, inst.A, cfg.spec, eps_rank=cfg.eps_rank)
    report = {"instance": inst.to_dict(), "centers_from": origin, "search": rep.to_dict()}
    if not rep.found:
        report["status"] = "none"
        return report, EXIT_NEGATIVE
    cert = certify_witness(rep.witness, inst.A, cfg.spec, strict=False, eps_rank=cfg.eps_rank)
    report["certification"] = cert.to_dict()
    report["status"] = "ok" if cert.passed else "failed"
    return report, EXIT_OK if cert.passed else EXIT_NEGATIVE


def cmd_sample_badset(data: dict, cfg: RunConfig):
    inst = instance_from_dict({**data, "p": None}, _centers_rng(cfg))
    outside = warned = 0
    rejected = []
    for i in range(cfg.samples):
        p = np.random.default_rng([cfg.seed, 3, i]).uniform(-1.0, 1.0, inst.A.shape)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cert = badset_certificate(inst.with_centers(p), None, cfg.eps_det, cfg.eps_rank)
        outside += cert.outside
        warned += bool(cert.warnings)
        if not cert.outside and len(rejected) < 10:
            rejected.append({"sample": i, "failing": [e.label for e in cert.entries if not e.outside]})
    report = {
        "instance": {"n": inst.n, "k": inst.k, "A": inst.A.tolist()},
        "branch": cert.branch,
        "samples": cfg.samples,
        "outside": outside,
        "inside": cfg.samples - outside,
        "warnings": warned,
        "outside_fraction": outside / cfg.samples,
        "first_rejections": rejected,
        "status": "ok",
    }
    return report, EXIT_OK


HANDLERS = {
    "classify": cmd_classify,
    "reduce": cmd_reduce,
    "verify": cmd_verify,
    "destabilize": cmd_destabilize,
    "sample-badset": cmd_sample_badset,
}

INVALID = (InvalidInstance, DimensionMismatch, RankMismatch, WrongBranch, SingularA1, UsageError)


def run(cfg: RunConfig) -> tuple[dict, int]:
    """Execute one command; returns ``(report, exit status)``."""
    base = {"config": cfg.to_dict()}
    try:
        data = read_document(cfg.input)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report, status = HANDLERS[cfg.command](data, cfg)
        notes = sorted({str(w.message) for w in caught})
        if notes:
            report["warnings_raised"] = notes
    except INVALID as exc:
        report = {"status": "invalid-input", "error": {"type": type(exc).__name__, "message": str(exc)}}
        status = EXIT_INVALID
    except BadSet as exc:
        report = {"status": "bad-set", "certificate": exc.certificate.to_dict()}
        status = EXIT_NEGATIVE
    except (SelfCheckFailure, DegenerateKernel, GDSError) as exc:
        report = {"status": "failed", "error": {"type": type(exc).__name__, "message": str(exc)}}
        status = EXIT_NEGATIVE
    return {**base, **report}, status


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except UsageError as exc:
        parser.error(str(exc))
    report, status = run(cfg)
    out = dumps(report) if cfg.format == "json" else render_text(report)
    sys.stdout.write(out)
    if status == EXIT_INVALID:
        print(f"gdsmap: {report['error']['message']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
