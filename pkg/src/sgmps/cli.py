"""Command-line front end: configuration, orchestration and persistence.

A run is driven by a JSON configuration document validated against
``schema/config.schema.json``.  Every default is written back into the
document, so the echoed configuration in the manifest reproduces the run.
Each invocation writes ``report.json`` and ``manifest.json`` (plus
``series.csv`` for commands with a separation series) into the output
directory.  Exit status: 0 success, 2 theorem check failed (data written),
1 error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from importlib import metadata, resources

import jsonschema
import numpy as np

from . import __version__
from .ensembles import EnsembleSpec, entry_time_tau, default_tau_cap, sample_window
from .errors import CalibrationFailed, ConfigError, InvalidInput, NoConvergence, SgmpsError
from .experiments import (
    DecayConstants,
    DecaySeries,
    ExperimentReport,
    _jsonable,
    c_expectation_series,
    calibrate_envelope,
    calibrate_iid,
    check_regime,
    default_depth,
    default_workers,
    estimate_xi,
    highprob_decay_table,
    pilot_profiles,
    sample_c_prefix,
    sample_two_point,
    spec_hash,
    sweep_two_point,
    wielandt_experiment,
    window_bound_experiment,
)
from .rng import RngSeed, as_seed
from .thermo import FAST_SEARCH, BoundaryCache, finite_expectation, limit_functional

COMMANDS = ("sample", "contraction", "thermo", "twopoint", "decay", "window", "wielandt", "xi")
DEFAULT_REGIME = {"TI": "TI", "IID": "IID", "FinitePool": "IID", "MarkovModulated": "BETA_EXP"}


def load_schema() -> dict:
    return json.loads(resources.files("sgmps").joinpath("schema/config.schema.json").read_text())


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    doc: dict  # fully materialized, schema-valid document
    spec: EnsembleSpec
    seed: RngSeed

    def __getattr__(self, name):
        doc = object.__getattribute__(self, "doc")
        if name in doc:
            return doc[name]
        raise AttributeError(name)

    def to_json(self) -> dict:
        return copy.deepcopy(self.doc)

    def observables(self):
        return tuple(_matrix(self.doc["observables"][k]) for k in ("m", "n"))

    def hash(self) -> str:
        return hashlib.sha256(canonical(self.doc).encode()).hexdigest()


def canonical(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _matrix(m):
    if isinstance(m, dict):
        re = np.asarray(m["re"], float)
        return re + 1j * np.asarray(m.get("im", np.zeros_like(re)), float)
    return np.asarray(m, float)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _validate(doc):
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        # oneOf failures report the alternatives; the deepest one names the real problem
        if e.context:
            e = max(e.context, key=lambda c: len(c.absolute_path))
        raise ConfigError(e.message, _pointer(e.absolute_path))


def _materialize(doc) -> dict:
    doc = copy.deepcopy(doc)
    spec = doc["spec"]
    d, D = spec["phys_dim"], spec["bond_dim"]
    for path, marg in [("marginal", spec.get("marginal"))] + [(f"branches/{i}", b) for i, b in enumerate(spec.get("branches", []))]:
        if isinstance(marg, dict) and marg.get("law") == "gaussian":
            marg.setdefault("sigma", 1 / math.sqrt(D))
        if isinstance(marg, dict) and marg.get("law") == "explicit":
            marg.setdefault("im", np.zeros_like(np.asarray(marg["re"], float)).tolist())
    if spec["kind"] in ("TI", "IID") and "marginal" not in spec:
        spec["marginal"] = {"law": "gaussian", "sigma": 1 / math.sqrt(D)}
    seed = doc.get("seed", 0)
    doc["seed"] = {"master": seed, "stream": 0} if isinstance(seed, int) else {"stream": 0, **seed}
    regime = doc.setdefault("regime", DEFAULT_REGIME[spec["kind"]])
    doc.setdefault("samples", 1000)
    doc.setdefault("workers", default_workers())
    doc.setdefault("tol", 1e-10)
    doc.setdefault("depth", None)
    doc.setdefault("length", 16)
    z = np.zeros((d, d))
    z[0, 0], z[1, 1] = 1.0, -1.0
    obs = doc.setdefault("observables", {})
    obs.setdefault("m", z.tolist())
    obs.setdefault("n", copy.deepcopy(obs["m"]))
    beta = regime == "BETA_EXP"
    doc.setdefault("separations", list(range(16, 49, 4)) if beta else list(range(2, 13)))
    doc.setdefault("epsilon", 0.1)
    doc.setdefault("window", 8)
    doc.setdefault("n_list", list(range(2, 13)))
    doc.setdefault("N_list", [4, 8, 16])
    doc["search"] = {**FAST_SEARCH, **doc.get("search", {})}
    cal = doc.setdefault("calibration", {})
    cal.setdefault("pilot_samples", 200)
    cal.setdefault("pilot_separations", list(range(16, 25)) if beta else list(range(3, 9)))
    cal.setdefault("exponent", 0.5)
    doc.setdefault("constants", None)
    if doc["constants"] is not None:
        doc["constants"].setdefault("floor", None)
        doc["constants"].setdefault("exponent", 1.0)
    doc.setdefault("out", "runs")
    return doc


def _check_transition(spec):
    P = spec.get("transition")
    if P is None:
        return
    for i, row in enumerate(P):
        if len(row) != len(P):
            raise ConfigError(f"row {i} has {len(row)} entries, expected {len(P)}", f"/spec/transition/{i}")
        if abs(sum(row) - 1) > 1e-12:
            raise ConfigError(f"row {i} sums to {sum(row):.15g}, not 1", f"/spec/transition/{i}")


def parse_config(source, overrides: dict | None = None) -> RunConfig:
    """Validate a configuration (path, JSON text or dict) and materialize every default."""
    if isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        text = str(source)
        if not text.lstrip().startswith("{"):
            try:
                with open(text) as fh:
                    text = fh.read()
            except OSError as e:
                raise ConfigError(f"cannot read config: {e.strerror}", "/") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON: {e.msg} at line {e.lineno}", "/") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", "/")
    doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
    _validate(doc)
    _check_transition(doc["spec"])
    doc = _materialize(doc)
    _validate(doc)
    try:
        spec = EnsembleSpec.from_json(doc["spec"])
    except InvalidInput as e:
        raise ConfigError(str(e), "/spec") from None
    if doc["separations"] != sorted(set(doc["separations"])):
        raise ConfigError("separations must be strictly increasing", "/separations")
    for k in ("m", "n"):
        O = _matrix(doc["observables"][k])
        if O.shape != (spec.phys_dim, spec.phys_dim):
            raise ConfigError(f"observable must be {spec.phys_dim}x{spec.phys_dim}", f"/observables/{k}")
        if not np.allclose(O, O.conj().T, atol=1e-12):
            raise ConfigError("observable must be Hermitian", f"/observables/{k}")
    seed = RngSeed(doc["seed"]["master"], doc["seed"]["stream"])
    return RunConfig(doc, spec, seed)


# ---------------------------------------------------------------- persistence


def atomic_write(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _versions():
    return {
        "sgmps": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "jsonschema": metadata.version("jsonschema"),
    }


# ---------------------------------------------------------------- commands


def _depth(cfg):
    return cfg.depth or default_depth(cfg.spec)


def _report(cfg, regime, series, fitted, check, extra=None):
    return ExperimentReport(spec_hash(cfg.spec), cfg.seed.to_json(), regime, series, fitted, check, extra or {})


def cmd_sample(cfg):
    cap = min(default_tau_cap(cfg.spec.phys_dim, cfg.spec.bond_dim), cfg.length)
    rows = []
    for s in range(cfg.samples):
        sd = cfg.seed.child(s)
        w = sample_window(cfg.spec, 0, cfg.length, sd)
        tau = entry_time_tau(w, cap)
        rows.append({
            "sample": s,
            "seed": sd.to_json(),
            "tau": int(tau),
            "tau_exceeds_cap": tau > cap,
            "hidden_path": None if w.hidden_path is None else [int(x) for x in w.hidden_path],
        })
    taus = np.array([r["tau"] for r in rows])
    fitted = {"mean_tau": float(taus.mean()), "tail_f": {str(b): float(np.mean(taus > b)) for b in range(1, cap + 1)}}
    check = {"passed": True, "exceeds_cap": int(sum(r["tau_exceeds_cap"] for r in rows))}
    return _report(cfg, cfg.regime, None, fitted, check, {"cap": cap, "windows": rows}), None


def cmd_contraction(cfg):
    n_list = sorted(cfg.n_list)
    if n_list[0] < 2:
        raise ConfigError("contraction series needs n >= 2", "/n_list")
    raw = sample_c_prefix(cfg.spec, n_list, cfg.samples, cfg.seed, cfg.search, cfg.workers)
    ser = c_expectation_series(cfg.spec, n_list, cfg.samples, cfg.seed, raw=raw)
    fit = ser.exp
    series = DecaySeries(tuple(n_list), (cfg.samples,) * len(n_list), ser.mean, ser.std, (math.nan,) * len(n_list),
                         tuple(float(np.mean(raw[:, j] < 1 - 1e-12)) for j in range(len(n_list))),
                         tuple(float(fit.prefactor * math.exp(-fit.rate * n)) for n in n_list),
                         (math.nan,) * len(n_list), "E[c(Phi^(n))] ~ C exp(-delta n)")
    # c(Phi^(n+1)) <= c(Phi^(n)) per sample, hence for the means up to search error
    steps = [ser.mean[j + 1] - ser.mean[j] - 3 * math.hypot(ser.se[j], ser.se[j + 1]) for j in range(len(n_list) - 1)]
    fitted = {"rate": fit.rate, "prefactor": fit.prefactor, "r_squared": fit.r_squared, "delta_ci": list(ser.delta_ci),
              "poly": asdict(ser.poly)}
    check = {"passed": bool(max(steps, default=0.0) <= 0), "monotone_margins": [-x for x in steps]}
    return _report(cfg, cfg.regime, series, fitted, check, {"se": list(ser.se)}), series


def cmd_xi(cfg):
    n_max = max(cfg.n_list)
    est = estimate_xi(cfg.spec, n_max, cfg.samples, cfg.seed, cfg.search, cfg.workers)
    fitted = {"xi_hat": est.xi_hat, "ci": list(est.ci), "per_n": [list(p) for p in est.per_n],
              "floored": est.floored, "minus_infinity": est.minus_infinity}
    check = {"passed": bool(est.minus_infinity or est.xi_hat < 0)}
    return _report(cfg, cfg.regime, None, fitted, check), None


def cmd_thermo(cfg):
    Ns = sorted(cfg.N_list)
    depth = _depth(cfg)
    Om = cfg.observables()[0]
    half = max(depth, max(Ns)) + 2
    rows, unconverged = [], 0
    for s in range(cfg.samples):
        w = sample_window(cfg.spec, -half, 2 * half + 1, cfg.seed.child(s))
        try:
            t = limit_functional(BoundaryCache(w, depth, cfg.tol), [(0, Om)])
        except NoConvergence:
            unconverged += 1
            rows.append({"sample": s, "limit": None, "gaps": None})
            continue
        gaps = [abs(t - finite_expectation(w, [(0, Om)], N)) for N in Ns]
        rows.append({"sample": s, "limit": float(np.real(t)), "gaps": gaps})
    ok = [r for r in rows if r["gaps"] is not None]
    monotone = sum(all(b <= a for a, b in zip(r["gaps"], r["gaps"][1:])) for r in ok)
    final = sum(r["gaps"][-1] <= 1e-6 for r in ok)
    fitted = {"max_final_gap": max((r["gaps"][-1] for r in ok), default=math.nan)}
    check = {"passed": bool(unconverged == 0 and monotone == len(ok) and final == len(ok)),
             "monotone": monotone, "final_gap_ok": final, "unconverged_samples": unconverged}
    return _report(cfg, cfg.regime, None, fitted, check, {"N": Ns, "windows": rows}), None


def cmd_twopoint(cfg):
    obs = cfg.observables()
    seps = cfg.separations
    data = sweep_two_point(cfg.spec, seps, obs, cfg.samples, cfg.seed, depth=cfg.depth, tol=cfg.tol,
                           search=cfg.search, workers=cfg.workers)
    rows = {k: [] for k in ("mean_c", "std_c", "mean_f", "prob", "bound")}
    violations = unconverged = 0
    for s in seps:
        X = data[s]
        rows["mean_c"].append(float(X[:, 1].mean()))
        rows["std_c"].append(float(X[:, 1].std(ddof=1)) if len(X) > 1 else 0.0)
        rows["mean_f"].append(float(np.nanmean(X[:, 0])) if not np.isnan(X[:, 0]).all() else math.nan)
        rows["prob"].append(float(np.mean(X[:, 0] <= X[:, 2] + 1e-8)))
        rows["bound"].append(float(X[:, 2].mean()))
        violations += int(np.sum(X[:, 0] > X[:, 2] + 1e-8))
        unconverged += int(np.sum(np.isnan(X[:, 0])))
    series = DecaySeries(tuple(seps), (cfg.samples,) * len(seps), tuple(rows["mean_c"]), tuple(rows["std_c"]),
                         tuple(rows["mean_f"]), tuple(rows["prob"]), tuple(rows["bound"]), (1.0,) * len(seps),
                         "f <= 8 D |O_m| |O_n| c_inner")
    check = {"passed": violations == 0, "bound_violations": violations, "unconverged_samples": unconverged,
             "retries": int(sum(data[s][:, 3].sum() for s in seps))}
    return _report(cfg, cfg.regime, series, {}, check), series


def calibrate_decay(cfg) -> tuple:
    """Constants for the configured regime, plus diagnostics of how they were chosen."""
    if cfg.constants is not None:
        return DecayConstants(**cfg.constants), {}
    regime, obs = cfg.regime, cfg.observables()
    nrm = float(np.prod([np.linalg.norm(o, 2) for o in obs]))
    cal = cfg.calibration
    pilot_seed = cfg.seed.child(1)
    if regime == "IID":
        ser = c_expectation_series(cfg.spec, sorted(cfg.n_list), cal["pilot_samples"], pilot_seed.child(0),
                                   cfg.search, cfg.workers)
        s_min = min(cfg.separations)
        X = sample_two_point(cfg.spec, s_min, obs, cal["pilot_samples"], pilot_seed.child(1), cfg.depth, cfg.tol,
                             cfg.search, cfg.workers)
        consts = calibrate_iid(ser.exp.rate, s_min, X[:, 0], nrm)
        return consts, {"delta_hat": ser.exp.rate, "delta_ci": list(ser.delta_ci), "c_r_squared": ser.exp.r_squared}
    seps = sorted(cal["pilot_separations"])
    f = pilot_profiles(cfg.spec, seps, obs, cal["pilot_samples"], pilot_seed, cfg.depth, cfg.tol, cfg.workers)
    exponent = cal["exponent"] if regime == "RHO_STRETCHED" else 1.0
    k_q = 0.5 if regime == "BETA_EXP" else None
    return calibrate_envelope(seps, f, nrm, cfg.epsilon, regime, k_q=k_q, exponent=exponent), {}


def cmd_decay(cfg):
    check_regime(cfg.spec, cfg.regime)
    consts, diag = calibrate_decay(cfg)
    rep = highprob_decay_table(cfg.spec, cfg.regime, cfg.observables(), cfg.separations, cfg.samples, consts,
                               cfg.seed.child(2), depth=cfg.depth, tol=cfg.tol, search=cfg.search, workers=cfg.workers)
    fitted = {**rep.fitted, **diag}
    return ExperimentReport(rep.spec_hash, cfg.seed.to_json(), rep.regime, rep.series, fitted, rep.theorem_check,
                            rep.extra), rep.series


def cmd_window(cfg):
    try:
        rep = window_bound_experiment(cfg.spec, cfg.window, cfg.epsilon, cfg.observables(), cfg.samples, cfg.seed,
                                      depth=cfg.depth, tol=cfg.tol, search=cfg.search, workers=cfg.workers)
    except CalibrationFailed as e:
        check = {"passed": False, "error": e.code, "message": str(e)}
        return _report(cfg, "WINDOW", None, {}, check), None
    return rep, rep.series


def cmd_wielandt(cfg):
    frac = wielandt_experiment(cfg.spec.phys_dim, cfg.spec.bond_dim, cfg.samples, cfg.seed)
    return _report(cfg, cfg.regime, None, {"fraction": frac}, {"passed": frac >= 0.998, "threshold": 0.998}), None


HANDLERS = {
    "sample": cmd_sample,
    "contraction": cmd_contraction,
    "thermo": cmd_thermo,
    "twopoint": cmd_twopoint,
    "decay": cmd_decay,
    "window": cmd_window,
    "wielandt": cmd_wielandt,
    "xi": cmd_xi,
}


def run(command: str, cfg: RunConfig, argv=None) -> int:
    """Execute one command, write its artifacts and return the exit status."""
    if command not in HANDLERS:
        raise InvalidInput(f"unknown command {command!r}")
    t0 = time.perf_counter()
    report, series = HANDLERS[command](cfg)
    wall = time.perf_counter() - t0
    out = cfg.out
    files = {"report.json": report.dumps()}
    if series is not None:
        files["series.csv"] = series.to_csv()
    for name, text in files.items():
        atomic_write(os.path.join(out, name), text)
    manifest = {
        "command": command,
        "argv": list(argv) if argv is not None else None,
        "config": cfg.to_json(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed.to_json(),
        "versions": _versions(),
        "wall_time": wall,
        "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in files.items()},
        "theorem_check_passed": bool(report.theorem_check.get("passed", False)),
    }
    atomic_write(os.path.join(out, "manifest.json"), json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n")
    return 0 if manifest["theorem_check_passed"] else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgmps", description="Decay experiments for random matrix product states.")
    p.add_argument("--version", action="version", version=f"sgmps {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="path to a JSON config, or inline JSON")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out")
        s.add_argument("--samples", type=int)
        s.add_argument("--separation-min", type=int)
        s.add_argument("--separation-max", type=int)
        s.add_argument("--regime", type=str.upper)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--window", type=int)
    return p


def overrides_from_args(args) -> dict:
    ov = {k: getattr(args, k) for k in ("workers", "out", "samples", "regime", "epsilon", "window")}
    if args.seed is not None:
        ov["seed"] = args.seed
    lo, hi = args.separation_min, args.separation_max
    if lo is not None or hi is not None:
        if lo is None or hi is None:
            raise ConfigError("--separation-min and --separation-max go together", "/separations")
        ov["separations"] = list(range(lo, hi + 1))
    return ov


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        return run(args.command, cfg, argv)
    except SgmpsError as e:
        err = {"error": e.code, "message": str(e)}
        if isinstance(e, ConfigError):
            err["pointer"] = e.pointer
        print(json.dumps(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
