"""Scenario files, analysis orchestration and machine-readable reports.

A scenario file is a sequence of bracketed sections holding `key = value`
lines.  Values are numbers, quoted strings (expressions), true/false, or
bracketed numeric lists.  `#` starts a comment outside quotes.
"""
import argparse
import ast
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .agmon import agmon_distance_1d, agmon_distance_grid, to_csv_rows, weight_W
from .exprdsl import ExprError, parse_expr
from .flow import gcc_time
from .geometry import GeometryError, Region, build_surface, effective_potential, region_from_config
from .observability import (DELTA_FIT, EPS_FLOOR, NAMED, ObservabilityError, build_named_scenario,
                            gramian_cost, slope_sweep, t_unif_bracket, theoretical_rate,
                            torus_cut_face, witness_cost)
from .spectral import SpectralError, assemble_operator, lowest_eigenpairs

SECTIONS = {
    "scenario": {"name", "builtin", "description", "seed"},
    "params": None,
    "geometry": {"case", "L", "R", "grid_n", "s_start", "boundary"},
    "fields": {"f", "q", "c"},
    "observation": {"omega", "boxes", "balls", "boundary", "theta", "mode", "condition"},
    "sweep": {"epsilons", "ks", "Ts", "delta_fit", "n_modes", "adaptive", "include_qf", "eta"},
    "run": {"analyses", "checks"},
}
BUILTIN_PARAMS = {
    "flambda": {"lam", "eta", "L", "n", "grid_n"},
    "sphere_caps": {"delta", "c", "L", "grid_n"},
    "torus_profile": {"delta", "alpha", "L", "a", "p", "grid_n"},
    "cylinder_profile": {"delta", "gamma", "L", "grid_n"},
}
ANALYSES = ("flow", "agmon", "spectral", "observability", "kernel")
CSV_COLUMNS = ["scenario", "method", "k", "eps", "T", "log_C0_times_eps", "theory_rate", "pass"]
EXIT_OK, EXIT_FAILED, EXIT_INVALID = 0, 1, 2


class ScenarioError(ValueError):
    def __init__(self, message, line=None, source="<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# ---------------------------------------------------------------- parsing

def _strip_comment(text):
    quote = None
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return text[:i]
    return text


def _parse_value(raw):
    raw = raw.strip()
    if raw in ("true", "false"):
        return raw == "true"
    if raw in ("all", "whole"):
        return raw
    val = ast.literal_eval(raw)
    if isinstance(val, tuple):
        val = list(val)
    _check_value(val)
    return val


def _check_value(val):
    if isinstance(val, bool) or isinstance(val, (int, float, str)):
        return
    if isinstance(val, list):
        if val and all(isinstance(v, str) for v in val):
            return          # list of names, e.g. analyses
        for v in val:
            if isinstance(v, str) or not isinstance(v, (int, float, list, tuple)):
                raise ValueError("lists hold names, numbers or nested numeric lists")
            if isinstance(v, (list, tuple)):
                _check_value(list(v))
        return
    raise ValueError(f"unsupported value {val!r}")


def parse_text(text: str, source: str = "<scenario>") -> dict:
    """Section -> key -> (value, line).  Rejects duplicates and unknown sections."""
    out = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = _strip_comment(line).strip()
        if not body:
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ScenarioError("unterminated section header", lineno, source)
            section = body[1:-1].strip()
            if section not in SECTIONS:
                raise ScenarioError(f"unknown section [{section}]", lineno, source)
            if section in out:
                raise ScenarioError(f"duplicate section [{section}]", lineno, source)
            out[section] = {}
            continue
        if section is None:
            raise ScenarioError("key outside of any section", lineno, source)
        if "=" not in body:
            raise ScenarioError("expected `key = value`", lineno, source)
        key, raw = body.split("=", 1)
        key = key.strip()
        if not key.isidentifier():
            raise ScenarioError(f"bad key {key!r}", lineno, source)
        allowed = SECTIONS[section]
        if allowed is not None and key not in allowed:
            raise ScenarioError(f"unknown key {key!r} in [{section}]", lineno, source)
        if key in out[section]:
            raise ScenarioError(f"duplicate key {key!r} in [{section}]", lineno, source)
        try:
            value = _parse_value(raw)
        except (ValueError, SyntaxError) as exc:
            raise ScenarioError(f"bad value for {key!r}: {exc}", lineno, source) from None
        out[section][key] = (value, lineno)
    return out


# ---------------------------------------------------------------- scenario

@dataclass
class Scenario:
    name: str
    geometry: dict
    f: str
    q: str = "0"
    c: float = 0.0
    omega: Region = field(default_factory=lambda: Region(whole=True))
    observed_boundary: Optional[tuple] = None
    mode: str = "general"
    condition: str = "GCC"
    epsilons: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    Ts: list = field(default_factory=list)
    delta_fit: float = DELTA_FIT
    n_modes: int = 24
    adaptive: bool = True
    include_qf: bool = True
    eta: float = 0.05
    analyses: tuple = ("flow", "agmon")
    checks: Optional[tuple] = None
    seed: int = 0
    builtin: Optional[str] = None
    params: dict = field(default_factory=dict)
    predicted: dict = field(default_factory=dict)
    cut: object = None
    source: str = "<scenario>"

    def sweep_pairs(self):
        """(k, eps) pairs: eps = c/k on revolution surfaces with c > 0, else k = 0."""
        if self.c > 0:
            return [(int(k), self.c / k) for k in self.ks]
        return [(0, float(e)) for e in self.epsilons]


BUILTIN_SWEEPS = {
    "sphere_caps": lambda sc: dict(ks=[20, 25, 32, 40, 50],
                                   Ts=[1.0, round(1.02 * sc.predicted["T_GCC"], 12)],
                                   analyses=("flow", "agmon", "spectral", "observability")),
    "flambda": lambda sc: dict(epsilons=[0.1, 0.07, 0.05, 0.035, 0.025],
                               Ts=[0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
                               analyses=("flow", "agmon", "observability") if sc.params["n"] == 1
                               else ("flow", "agmon")),
    "torus_profile": lambda sc: dict(ks=[20, 25, 32, 40], Ts=[1.0],
                                     analyses=("flow", "agmon", "spectral", "observability")),
    "cylinder_profile": lambda sc: dict(ks=[20, 25, 32, 40, 50], Ts=[0.5],
                                        analyses=("flow", "agmon", "observability")),
}


def _num_list(value, key, line, source, positive=True):
    if not isinstance(value, list) or not value:
        raise ScenarioError(f"{key} must be a non-empty list", line, source)
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ScenarioError(f"{key} must hold numbers", line, source)
        if positive and not v > 0:
            raise ScenarioError(f"{key} values must be positive", line, source)
        out.append(float(v))
    return out


def _get(sec, key, default=None):
    return sec[key][0] if key in sec else default


def _line(sec, key):
    return sec[key][1] if key in sec else None


def build_scenario(parsed: dict, source: str = "<scenario>") -> Scenario:
    head = parsed.get("scenario", {})
    builtin = _get(head, "builtin")
    name = _get(head, "name", builtin)
    if not isinstance(name, str) or not name:
        raise ScenarioError("[scenario] needs a name or a builtin", _line(head, "name"), source)
    seed = _get(head, "seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ScenarioError("seed must be an integer", _line(head, "seed"), source)

    if builtin is not None:
        if builtin not in NAMED:
            raise ScenarioError(f"unknown builtin {builtin!r}", _line(head, "builtin"), source)
        for sec in ("geometry", "fields", "observation"):
            if sec in parsed:
                first = min((ln for _, ln in parsed[sec].values()), default=None)
                raise ScenarioError(f"[{sec}] cannot be combined with a builtin; use [params]",
                                    first, source)
        params = parsed.get("params", {})
        for key, (_, ln) in params.items():
            if key not in BUILTIN_PARAMS[builtin]:
                raise ScenarioError(f"unknown parameter {key!r} for builtin {builtin}", ln, source)
        try:
            named = build_named_scenario(builtin, {k: v for k, (v, _) in params.items()})
        except (ObservabilityError, GeometryError, ExprError) as exc:
            raise ScenarioError(str(exc), min((ln for _, ln in params.values()), default=None),
                                source) from None
        sc = Scenario(name, named.geometry, named.f, named.q, named.c, named.omega,
                      named.observed_boundary, named.mode, named.condition, builtin=builtin,
                      params=dict(named.params), predicted=dict(named.predicted), cut=named.cut,
                      seed=seed, source=source)
        for key, val in BUILTIN_SWEEPS[builtin](sc).items():
            setattr(sc, key, list(val) if isinstance(val, list) else val)
    else:
        if "params" in parsed:
            raise ScenarioError("[params] needs a builtin", min(ln for _, ln in parsed["params"].values())
                                if parsed["params"] else None, source)
        geo = parsed.get("geometry")
        if not geo:
            raise ScenarioError("missing [geometry] section", None, source)
        fields_ = parsed.get("fields", {})
        if "f" not in fields_:
            raise ScenarioError("[fields] needs f", None, source)
        geometry = {k: v for k, (v, _) in geo.items()}
        obs = parsed.get("observation", {})
        sc = Scenario(name, geometry, str(_get(fields_, "f")), str(_get(fields_, "q", "0")),
                      float(_get(fields_, "c", 0.0)), seed=seed, source=source)
        dim_vars = ("x1", "x2") if geometry.get("case") == "box2d" else ("s",)
        for key in ("f", "q"):
            if key in fields_:
                val = fields_[key][0]
                if not isinstance(val, (str, int, float)) or isinstance(val, bool):
                    raise ScenarioError(f"{key} must be an expression string", fields_[key][1], source)
                try:
                    parse_expr(str(val), dim_vars)
                except ExprError as exc:
                    raise ScenarioError(f"{key}: {exc}", fields_[key][1], source) from None
        if "R" in geo:
            try:
                parse_expr(str(geo["R"][0]), ("s",))
            except ExprError as exc:
                raise ScenarioError(f"R: {exc}", geo["R"][1], source) from None
        if sc.c < 0:
            raise ScenarioError("c must be nonnegative", _line(fields_, "c"), source)
        if "omega" in obs or "boxes" in obs or "balls" in obs:
            if "boxes" in obs or "balls" in obs:
                cfg = {"intervals": [], "boxes": _get(obs, "boxes", []), "balls": _get(obs, "balls", [])}
                if "omega" in obs:
                    cfg["intervals"] = _get(obs, "omega")
                sc.omega = region_from_config(cfg)
            else:
                om = _get(obs, "omega")
                if om != "all" and om != "whole" and not isinstance(om, list):
                    raise ScenarioError("omega must be a list of [a, b] intervals or \"all\"",
                                        _line(obs, "omega"), source)
                try:
                    sc.omega = region_from_config(om)
                except (TypeError, ValueError):
                    raise ScenarioError("omega must be a list of [a, b] intervals",
                                        _line(obs, "omega"), source) from None
        if "boundary" in obs:
            sc.observed_boundary = tuple(_num_list(obs["boundary"][0], "boundary", obs["boundary"][1],
                                                   source, positive=False))
        if "theta" in obs:
            th = _num_list(obs["theta"][0], "theta", obs["theta"][1], source, positive=False)
            if len(th) != 2 or th[1] - th[0] < 2 * math.pi - 1e-12:
                raise ScenarioError("only rotationally invariant omega is supported (theta = [0, 2*pi])",
                                    obs["theta"][1], source)
        sc.mode = _get(obs, "mode", "revolution" if geometry.get("case") in
                       ("sphere", "disk", "cylinder", "torus") else "general")
        if sc.mode not in ("revolution", "general", "boundary"):
            raise ScenarioError(f"unknown mode {sc.mode!r}", _line(obs, "mode"), source)
        sc.condition = _get(obs, "condition", "GCC")
        if sc.condition not in ("GCC", "FC"):
            raise ScenarioError(f"unknown condition {sc.condition!r}", _line(obs, "condition"), source)
        if geometry.get("case") == "torus":
            sc.cut = "auto"

    sweep = parsed.get("sweep", {})
    if "epsilons" in sweep:
        sc.epsilons = _num_list(sweep["epsilons"][0], "epsilons", sweep["epsilons"][1], source)
        bad = [e for e in sc.epsilons if e < EPS_FLOOR - 1e-15]
        if bad:
            raise ScenarioError(f"eps values must be >= {EPS_FLOOR}", sweep["epsilons"][1], source)
    if "ks" in sweep:
        ks = _num_list(sweep["ks"][0], "ks", sweep["ks"][1], source)
        if any(k != int(k) for k in ks):
            raise ScenarioError("ks must be integers", sweep["ks"][1], source)
        sc.ks = [int(k) for k in ks]
    if "Ts" in sweep:
        sc.Ts = _num_list(sweep["Ts"][0], "Ts", sweep["Ts"][1], source)
    for key, kind in (("delta_fit", float), ("eta", float), ("n_modes", int)):
        if key in sweep:
            val = sweep[key][0]
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
                raise ScenarioError(f"{key} must be a positive number", sweep[key][1], source)
            setattr(sc, key, kind(val))
    for key in ("adaptive", "include_qf"):
        if key in sweep:
            if not isinstance(sweep[key][0], bool):
                raise ScenarioError(f"{key} must be true or false", sweep[key][1], source)
            setattr(sc, key, sweep[key][0])

    run = parsed.get("run", {})
    if "analyses" in run:
        val, ln = run["analyses"]
        names = [val] if isinstance(val, str) else val
        if not isinstance(names, list) or not names or any(a not in ANALYSES for a in names):
            raise ScenarioError(f"analyses must be names from {', '.join(ANALYSES)}", ln, source)
        sc.analyses = tuple(a for a in ANALYSES if a in names)
    if "checks" in run:
        val, ln = run["checks"]
        names = [val] if isinstance(val, str) else val
        if not isinstance(names, list) or any(not isinstance(n, str) for n in names):
            raise ScenarioError("checks must be a list of check-family names", ln, source)
        unknown = [n for n in names if n not in CHECK_FAMILIES]
        if unknown:
            raise ScenarioError(f"unknown check family {unknown[0]!r}", ln, source)
        sc.checks = tuple(names)

    _validate(sc, parsed, source)
    return sc


def _validate(sc: Scenario, parsed: dict, source: str):
    geo = parsed.get("geometry", {})
    try:
        spec = build_surface(sc.geometry)
    except (GeometryError, ExprError) as exc:
        first = min((ln for _, ln in geo.values()), default=None)
        raise ScenarioError(f"geometry: {exc}", first, source) from None
    obs = parsed.get("observation", {})
    ln = _line(obs, "omega")
    if spec.dim == 1 and not spec.periodic:
        for a, b in sc.omega.intervals:
            if not (spec.s_start - 1e-12 <= a <= b <= spec.s_end + 1e-12):
                raise ScenarioError(f"omega interval [{a}, {b}] leaves the domain "
                                    f"[{spec.s_start}, {spec.s_end}]", ln, source)
    elif spec.dim == 1:
        for a, b in sc.omega.intervals:
            if not b > a:
                raise ScenarioError(f"omega interval [{a}, {b}] is empty", ln, source)
    else:
        lo, hi = spec.s_start, spec.s_end
        for box in sc.omega.boxes:
            for a, b in box:
                if not (lo - 1e-12 <= a <= b <= hi + 1e-12):
                    raise ScenarioError("omega box leaves the domain", _line(obs, "boxes"), source)
    if sc.observed_boundary:
        for p in sc.observed_boundary:
            if not any(abs(p - b) < 1e-12 for b in spec.boundary):
                raise ScenarioError(f"{p} is not a boundary point", _line(obs, "boundary"), source)
    if sc.c > 0 and not spec.revolution:
        raise ScenarioError("c > 0 needs a revolution surface", None, source)
    sweep = parsed.get("sweep", {})
    if sc.c > 0:
        if sc.epsilons and "epsilons" in sweep:
            raise ScenarioError("with c > 0 the eps grid is c/k; give ks, not epsilons",
                                _line(sweep, "epsilons"), source)
        small = [k for k in sc.ks if sc.c / k < EPS_FLOOR - 1e-15]
        if small:
            raise ScenarioError(f"k={small[0]} gives eps = c/k below {EPS_FLOOR}", _line(sweep, "ks"), source)
    needs_sweep = [a for a in ("observability", "kernel") if a in sc.analyses]
    if needs_sweep:
        if not sc.Ts:
            raise ScenarioError(f"{needs_sweep[0]} needs Ts in [sweep]", None, source)
        if len(sc.sweep_pairs()) < 4:
            raise ScenarioError("rate fits need at least 4 eps values (epsilons, or ks when c > 0)",
                                _line(sweep, "ks") or _line(sweep, "epsilons"), source)
    if "kernel" in sc.analyses and (spec.dim != 1 or sc.c > 0):
        raise ScenarioError("kernel analysis runs on one-dimensional (meridian) scenarios with c = 0",
                            _line(parsed.get("run", {}), "analyses"), source)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read file: {exc.strerror}", None, path) from None
    return build_scenario(parse_text(text, path), path)


def builtin_scenario(name: str, params: Optional[dict] = None) -> Scenario:
    lines = [f'[scenario]\nbuiltin = "{name}"']
    if params:
        lines.append("[params]")
        lines.extend(f"{k} = {v!r}" for k, v in params.items())
    text = "\n".join(lines) + "\n"
    return build_scenario(parse_text(text, f"builtin:{name}"), f"builtin:{name}")


# ---------------------------------------------------------------- report

CHECK_FAMILIES = ("flow_closed_form", "flow_predicted", "flow_diam", "gramian_ge_witness",
                  "rate_vs_theory", "witness_vs_theory", "t_lo_vs_bound", "positive_rates")


class Report:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.scalars = {}
        self.checks = []
        self.rows = {}

    def put(self, key, value):
        self.scalars[key] = value

    def check(self, family, name, passed, measured, expected, tolerance):
        if self.sc.checks is not None and family not in self.sc.checks:
            return
        self.checks.append({"name": name, "pass": bool(passed), "measured": measured,
                            "expected": expected, "tolerance": tolerance})

    def row(self, table, method, k, eps, T, value, theory, passed):
        self.rows.setdefault(table, []).append([self.sc.name, method, k, eps, T, value, theory, passed])

    @property
    def all_pass(self):
        return all(c["pass"] for c in self.checks)


def _json_scalar(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_csv_cell(v) for v in r])


def write_report(rep: Report, out_dir: str, timestamp: Optional[str] = None):
    doc = {k: _json_scalar(v) for k, v in sorted(rep.scalars.items())}
    doc["timestamp"] = timestamp or time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    doc["checks"] = [{k: _json_scalar(v) for k, v in c.items()} for c in rep.checks]
    doc["all_pass"] = rep.all_pass
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- analyses

def _fmt(x):
    return f"{x:.6g}"


def _flow(sc, spec, rep, out_dir, threads):
    sim = gcc_time(spec, sc.f, sc.omega, sc.condition, "simulation", threads=threads)
    key = f"T_{sc.condition}"
    rep.put(f"flow.{key}_simulation", sim.T_min)
    rep.put("flow.satisfied", sim.satisfied)
    rows = []
    if sim.hitting is not None and spec.dim == 1:
        rows = [[s, t] for s, t in zip(sim.starts, sim.hitting)]
        write_csv(os.path.join(out_dir, "flow.csv"), ["s", "backward_hitting_time"], rows)
    cf = None
    if spec.dim == 1:
        cf = gcc_time(spec, sc.f, sc.omega, sc.condition, "closed_form")
        rep.put(f"flow.{key}_closed_form", cf.T_min)
        if cf.reason:
            rep.put("flow.closed_form_note", cf.reason)
        if math.isfinite(sim.T_min) or math.isfinite(cf.T_min):
            gap = abs(sim.T_min - cf.T_min) if math.isfinite(sim.T_min) and math.isfinite(cf.T_min) else math.inf
            rep.check("flow_closed_form", f"{key} simulation vs closed form", gap <= 1e-3,
                      sim.T_min, cf.T_min, 1e-3)
    if key in sc.predicted:
        pred = sc.predicted[key]
        rep.put(f"predicted.{key}", pred)
        rep.check("flow_predicted", f"{key} matches L - 2 delta", abs(sim.T_min - pred) <= 1e-3,
                  sim.T_min, pred, 1e-3)
    if "diam" in sc.predicted:
        rep.put("predicted.diam", sc.predicted["diam"])
        rep.check("flow_diam", f"{key} <= diam", sim.T_min <= sc.predicted["diam"],
                  sim.T_min, sc.predicted["diam"], 0.0)
    return sim


def _agmon(sc, spec, rep, out_dir):
    c = sc.c if spec.revolution else 0.0
    pot = effective_potential(spec, sc.f, c)
    ag = agmon_distance_grid(pot) if spec.dim == 2 else agmon_distance_1d(pot)
    W = weight_W(ag, sc.f, sc.omega if not sc.omega.whole or spec.dim == 1 else sc.omega)
    rep.put("agmon.V_min", pot.V_min)
    rep.put("agmon.unique_min", pot.unique_min)
    if spec.dim == 2:
        rep.put("agmon.s_min_x1", pot.s_min[0])
        rep.put("agmon.s_min_x2", pot.s_min[1])
    else:
        rep.put("agmon.s_min", pot.s_min)
    rep.put("agmon.E", ag.E)
    rep.put("agmon.d_A_max", float(np.max(ag.d_A[np.isfinite(ag.d_A)])))
    rep.put("agmon.W_m", W.W_m)
    rep.put("agmon.W_omega", W.W_omega)
    if W.W_boundary:
        for b, v in sorted(W.W_boundary.items()):
            rep.put(f"agmon.W_boundary_{_fmt(b)}", v)
    header, table = to_csv_rows(W)
    write_csv(os.path.join(out_dir, "agmon.csv"), header, table.tolist())
    return pot, W


def _cut(sc, spec, W):
    if sc.cut == "auto" and spec.periodic:
        return torus_cut_face(spec, W, sc.omega)
    return sc.cut if isinstance(sc.cut, int) else None


def _spectral(sc, spec, pot, W, rep, out_dir):
    cut = _cut(sc, spec, W)
    rows = []
    pairs = sc.sweep_pairs() or [(0, 0.1)]
    for k, eps in pairs:
        op = assemble_operator(spec, sc.f, sc.q, eps, k, include_qf=sc.include_qf, cut=cut)
        for p in lowest_eigenpairs(op, min(5, op.size)):
            rows.append([k, eps, p.index, p.mu, pot.V_min, p.residual])
        rep.put(f"spectral.mu0_k{k}_eps{_fmt(eps)}", rows[-min(5, op.size)][3])
    write_csv(os.path.join(out_dir, "spectral.csv"), ["k", "eps", "index", "mu", "V_min", "residual"], rows)


def _observability(sc, spec, pot, W, rep, out_dir):
    cut = _cut(sc, spec, W)
    pairs_ke = sc.sweep_pairs()
    eps_list = [e for _, e in pairs_ke]
    target = "boundary" if sc.mode == "boundary" else "interior"
    omega = None if sc.mode == "boundary" else sc.omega
    ops = {}
    eig = {}
    for k, eps in pairs_ke:
        op = assemble_operator(spec, sc.f, sc.q, eps, k, include_qf=sc.include_qf, cut=cut)
        ops[(k, eps)] = op
        eig[(k, eps)] = lowest_eigenpairs(op, min(sc.n_modes, op.size))
    rates = {"gramian": [], "witness": []}
    diag = 0
    for T in sc.Ts:
        tag = f"T{_fmt(T)}"
        try:
            tb = theoretical_rate(W, pot, sc.omega, T, sc.mode, sc.observed_boundary)
            theory = tb.rate
            rep.put(f"observability.{tag}.theory_rate", theory)
            rep.put(f"observability.{tag}.T_bound", tb.T_bound)
            rep.put(f"observability.{tag}.never_observable", tb.never)
        except ObservabilityError as exc:
            theory = None
            rep.put(f"observability.{tag}.theory_note", str(exc))
        rep.row("observability", "theory", None, None, T, theory, theory, None)
        logs = {"gramian": [], "witness": []}
        for (k, eps) in pairs_ke:
            pairs = eig[(k, eps)]
            wit = witness_cost(pairs[0], sc.f, omega, T, eps, target=target, spec=spec)
            wlog = math.nan if wit.refused else wit.log_ratio
            logs["witness"].append(wlog)
            rep.row("observability", "witness", k, eps, T, eps * wlog, theory, None)
            if sc.mode == "boundary":
                continue
            g = gramian_cost(ops[(k, eps)], sc.f, omega, T, sc.n_modes, sc.adaptive, pairs)
            glog = math.nan if g.refused else g.log_C0
            if g.reason:
                diag += 1
                rep.put(f"observability.diagnostic_{diag:03d}", f"T={_fmt(T)} k={k} eps={_fmt(eps)}: {g.reason}")
            logs["gramian"].append(glog)
            ok = None
            if math.isfinite(glog) and math.isfinite(wlog):
                ok = glog >= wlog - 1e-9 * max(1.0, abs(wlog))
                rep.check("gramian_ge_witness", f"gramian >= witness at T={_fmt(T)} k={k} eps={_fmt(eps)}",
                          ok, eps * glog, eps * wlog, 1e-9)
            rep.row("observability", "gramian", k, eps, T, eps * glog, theory, ok)
        for method in ("gramian", "witness"):
            if not logs[method]:
                continue
            fit = slope_sweep(eps_list, logs[method], theory, sc.delta_fit)
            rates[method].append(fit.fitted_rate if not fit.partial else math.nan)
            rep.put(f"observability.{tag}.{method}_fitted_rate", fit.fitted_rate)
            rep.put(f"observability.{tag}.{method}_fit_width", fit.width)
            rep.row("observability", f"fit_{method}", None, None, T, fit.fitted_rate, theory, fit.passed)
            if theory is None:
                continue
            if method == "gramian" or sc.mode == "boundary":
                rep.check("rate_vs_theory", f"{method} fitted rate >= theory - delta_fit at T={_fmt(T)}",
                          bool(fit.passed), fit.fitted_rate, theory, sc.delta_fit)
            if method == "witness" and sc.builtin == "sphere_caps" and T <= 1.0 + 1e-12:
                gap = abs(fit.fitted_rate - theory) if not fit.partial else math.inf
                rep.check("witness_vs_theory", f"witness fitted rate within 0.15 of theory at T={_fmt(T)}",
                          gap <= 0.15, fit.fitted_rate, theory, 0.15)
    key = "gramian" if sc.mode != "boundary" else "witness"
    if len(sc.Ts) > 1 and all(b > a for a, b in zip(sc.Ts, sc.Ts[1:])):
        lo, hi = t_unif_bracket(sc.Ts, [r if math.isfinite(r) else -math.inf for r in rates[key]],
                                sc.delta_fit)
        rep.put("observability.T_lo", lo)
        rep.put("observability.T_hi", hi)
        if "T_unif_lower" in sc.predicted:
            bound = sc.predicted["T_unif_lower"]
            rep.put("predicted.T_unif_lower", bound)
            rep.check("t_lo_vs_bound", "T_lo >= lambda eta^2 / n - delta_fit",
                      lo is not None and lo >= bound - sc.delta_fit,
                      lo if lo is not None else math.nan, bound, sc.delta_fit)
    for key_p, val in sorted(sc.predicted.items()):
        rep.put(f"predicted.{key_p}", val)
    write_csv(os.path.join(out_dir, "observability.csv"), CSV_COLUMNS, rep.rows.get("observability", []))


def _kernel(sc, spec, rep, out_dir, flow_report):
    from .kernel import dx_sup_inf, positive_cost
    eps_list = [e for _, e in sc.sweep_pairs()]
    ops = {e: assemble_operator(spec, sc.f, sc.q, e, 0, include_qf=sc.include_qf) for e in eps_list}
    T_gcc = flow_report.T_min if flow_report is not None else math.inf
    for T in sc.Ts:
        tag = f"T{_fmt(T)}"
        sup = dx_sup_inf(sc.f, sc.omega, T, spec)
        rep.put(f"kernel.{tag}.dX_sup_inf", sup.value)
        rep.put(f"kernel.{tag}.dX_sup_inf_tolerance", sup.tolerance)
        rep.row("kernel", "dX_sup_inf", None, None, T, sup.value, None, None)
        logs = []
        for e in eps_list:
            lc = positive_cost(ops[e], sc.f, sc.omega, T, sc.eta, None)
            logs.append(lc)
            rep.row("kernel", "positive", 0, e, T, e * lc, sup.value, None)
        fit = slope_sweep(eps_list, logs)
        rep.put(f"kernel.{tag}.positive_fitted_rate", fit.fitted_rate)
        if T > T_gcc:
            ok = fit.fitted_rate <= sc.delta_fit
            rep.check("positive_rates", f"positive rate <= delta_fit above T_GCC at T={_fmt(T)}",
                      ok, fit.fitted_rate, 0.0, sc.delta_fit)
        elif sup.value > sup.tolerance:
            ok = fit.fitted_rate >= sup.value - sc.delta_fit
            rep.check("positive_rates", f"positive rate >= sup-inf action - delta_fit at T={_fmt(T)}",
                      ok, fit.fitted_rate, sup.value, sc.delta_fit)
        else:
            ok = None
        rep.row("kernel", "fit_positive", None, None, T, fit.fitted_rate, sup.value, ok)
    write_csv(os.path.join(out_dir, "kernel.csv"), CSV_COLUMNS, rep.rows.get("kernel", []))


def run_scenario(sc: Scenario, out_dir: str, threads: int = 1, seed: Optional[int] = None,
                 timestamp: Optional[str] = None) -> int:
    """Run the requested analyses in dependency order; exit status 0 iff every check passes."""
    os.makedirs(out_dir, exist_ok=True)
    rep = Report(sc)
    seed = sc.seed if seed is None else seed
    np.random.seed(seed)
    rep.put("scenario", sc.name)
    rep.put("seed", seed)
    rep.put("builtin", sc.builtin)
    for k, v in sorted(sc.params.items()):
        rep.put(f"params.{k}", v)
    rep.put("mode", sc.mode)
    rep.put("condition", sc.condition)
    rep.put("analyses", ",".join(sc.analyses))
    spec = build_surface(sc.geometry)
    rep.put("geometry.case", spec.case)
    rep.put("geometry.L", spec.L)
    rep.put("geometry.grid_n", spec.grid_n)
    flow_report = pot = W = None
    status = EXIT_OK
    try:
        if "flow" in sc.analyses:
            flow_report = _flow(sc, spec, rep, out_dir, threads)
        if any(a in sc.analyses for a in ("agmon", "spectral", "observability")):
            pot, W = _agmon(sc, spec, rep, out_dir)
        if "spectral" in sc.analyses:
            _spectral(sc, spec, pot, W, rep, out_dir)
        if "observability" in sc.analyses:
            if spec.dim != 1:
                raise ObservabilityError("observability sweeps run on one-dimensional operators")
            _observability(sc, spec, pot, W, rep, out_dir)
        if "kernel" in sc.analyses:
            _kernel(sc, spec, rep, out_dir, flow_report)
    except (ObservabilityError, SpectralError, GeometryError, ExprError, ValueError) as exc:
        rep.put("error", f"{type(exc).__name__}: {exc}")
        rep.checks.append({"name": "analyses completed", "pass": False, "measured": None,
                           "expected": None, "tolerance": None})
    write_report(rep, out_dir, timestamp)
    if not rep.all_pass:
        status = EXIT_FAILED
    return status


# ---------------------------------------------------------------- entry point

def _builtin_listing():
    out = []
    for name in NAMED:
        sc = builtin_scenario(name)
        params = ", ".join(f"{k}={v!r}" for k, v in sorted(sc.params.items()))
        sweep = f"ks={sc.ks}" if sc.ks else f"epsilons={sc.epsilons}"
        out.append(f"{name}: {params}; {sweep}; Ts={sc.Ts}; analyses={','.join(sc.analyses)}")
    return out


def _resolve(target: str) -> Scenario:
    if target.startswith("builtin:"):
        name = target.split(":", 1)[1]
        if name not in NAMED:
            raise ScenarioError(f"unknown builtin {name!r}", None, target)
        return builtin_scenario(name)
    return load_scenario(target)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="viscobs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario file (or builtin:<name>)")
    p_run.add_argument("scenario")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed", type=int, default=None)
    sub.add_parser("list-builtins", help="list the named scenarios")
    p_check = sub.add_parser("check", help="parse and validate a scenario file")
    p_check.add_argument("scenario")
    args = parser.parse_args(argv)

    if args.command == "list-builtins":
        for line in _builtin_listing():
            print(line)
        return EXIT_OK
    try:
        sc = _resolve(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "check":
        pairs = sc.sweep_pairs()
        print(f"ok: {sc.name} ({sc.geometry.get('case')}, {len(pairs)} eps values, "
              f"{len(sc.Ts)} horizons, analyses {','.join(sc.analyses)})")
        return EXIT_OK
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    status = run_scenario(sc, args.out, args.threads, args.seed)
    with open(os.path.join(args.out, "report.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    for c in doc["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}")
    if "error" in doc:
        print(f"error: {doc['error']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
