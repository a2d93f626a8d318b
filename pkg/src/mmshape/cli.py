"""Config-driven experiment runner.

Usage::

    mmshape <task> CONFIG.yaml [--seed N] [--out DIR] [--levels L] [--c C] [--k K]

Tasks: audit, solve, spectrum, energy, capacity, optimize, gamma-study,
perforated.  Each run writes ``manifest.json`` (resolved config, versions,
wall time, tolerances) and ``result.json`` (a pure function of config and
seed) into the output directory, plus CSV field dumps where applicable.

Exit codes: 0 success, 2 invalid configuration or input, 3 resource limit.
"""
from __future__ import annotations

import argparse
import json
import math
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .builders import BuilderSpec, build
from .bvp import TAU_POS, energy_set_reduce, solve_bvp, write_field_csv
from .capacity import capacity, capacity_qp, check_h0_equivalence
from .errors import InputError, MMShapeError, ParameterError, ResourceError
from .gamma import (build_hierarchy, constant_sequence, enlarge_sequence, gamma_distance,
                    perforated_study, stripe_sequence, weak_gamma_analyze)
from .mmspace import (Domain, DiscreteSpace, audit_axioms, export_form_matrix, load_space,
                      space_from_json)
from .optimizer import (PhiFunctional, exhaustive_optimize, local_search_optimize,
                        threshold_iterate)
from .spectrum import dirichlet_energy, eigenvalues

TASKS = ("audit", "solve", "spectrum", "energy", "capacity", "optimize", "gamma-study", "perforated")

EXIT_OK, EXIT_CONFIG, EXIT_RESOURCE = 0, 2, 3

TOP_KEYS = {
    "task", "builder", "space", "domain", "a", "f", "k", "c", "phi", "method", "restarts",
    "max_moves", "iters", "levels", "sequence", "holes", "enlarge", "trials", "seed",
    "tolerances", "output", "h0",
}
BUILDER_KEYS = {"kind", "extent", "h", "anisotropy", "q", "radius", "z_ratio"}
SPACE_KEYS = {"file", "inline", "graph"}
GRAPH_KEYS = {"measure", "edges", "coords", "absorbed"}
DOMAIN_KEYS = {"points", "box", "ball", "all"}
PHI_KEYS = {"kind", "k", "weights", "indices"}
HOLES_KEYS = {"eps", "radius"}
ENLARGE_KEYS = {"eps", "target"}
SEQUENCE_KEYS = {"kind", "domain", "cells", "axis", "mode"}
TOL_KEYS = {"tau_pos"}
OUTPUT_KEYS = {"fields", "matrix_market"}

DEFAULTS = {
    "a": 1.0, "f": 1.0, "k": 3, "method": "exhaustive", "restarts": 20, "max_moves": 200,
    "iters": 20, "levels": 4, "trials": 200, "seed": 0, "tolerances": {"tau_pos": TAU_POS},
    "output": {"fields": True, "matrix_market": False},
}


class ConfigError(MMShapeError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# ---------------------------------------------------------------------------
# config loading with line numbers


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            _line_map(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[path + (i,)] = v.start_mark.line + 1
            _line_map(v, path + (i,), out)
    return out


class Config:
    """Parsed YAML mapping that remembers the source line of every key."""

    def __init__(self, data: dict, lines: dict, source: str):
        self.data = data
        self.lines = lines
        self.source = source

    @classmethod
    def load(cls, path) -> "Config":
        text = Path(path).read_text(encoding="utf-8")
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                              None if mark is None else mark.line + 1) from None
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping", 1)
        return cls(data, _line_map(node) if node is not None else {}, str(path))

    def line(self, *path) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            path = path[:-1]
        return None

    def error(self, message: str, *path) -> ConfigError:
        return ConfigError(message, self.line(*path))

    def check_keys(self, mapping, allowed, *path) -> None:
        if not isinstance(mapping, dict):
            raise self.error(f"'{'.'.join(map(str, path)) or 'config'}' must be a mapping", *path)
        for key in mapping:
            if key not in allowed:
                where = ".".join(map(str, path + (key,)))
                raise self.error(f"unknown key '{where}' (allowed: {', '.join(sorted(allowed))})", *path, key)


def _number(cfg: Config, value, *path, integer=False, positive=False, allow_zero=False):
    try:
        if isinstance(value, bool):
            raise TypeError
        v = int(value) if integer else float(value)
        if integer and v != value:
            raise TypeError
    except (TypeError, ValueError):
        raise cfg.error(f"'{'.'.join(map(str, path))}' must be {'an integer' if integer else 'a number'}",
                        *path) from None
    if positive and not (v > 0 or (allow_zero and v == 0)):
        raise cfg.error(f"'{'.'.join(map(str, path))}' must be positive", *path)
    return v


def resolve(cfg: Config, task: str, overrides: dict) -> dict:
    """Validate keys, apply defaults and command-line overrides."""
    data = cfg.data
    cfg.check_keys(data, TOP_KEYS)
    if "task" in data and data["task"] != task:
        raise cfg.error(f"config is for task '{data['task']}', command line asked for '{task}'", "task")
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for k, v in data.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            cfg.check_keys(v, TOL_KEYS if k == "tolerances" else OUTPUT_KEYS, k)
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    for k, v in overrides.items():
        if v is not None:
            out[k] = v
    out["task"] = task
    if ("builder" in out) == ("space" in out):
        raise cfg.error("give exactly one of 'builder' or 'space'", "builder" if "builder" in out else "space")
    for key in ("a", "c"):
        if key in out:
            out[key] = _number(cfg, out[key], key)
    for key in ("k", "restarts", "max_moves", "iters", "levels", "trials", "seed"):
        out[key] = _number(cfg, out[key], key, integer=True)
    out["tolerances"]["tau_pos"] = _number(cfg, out["tolerances"]["tau_pos"], "tolerances", "tau_pos",
                                           positive=True, allow_zero=True)
    return out


# ---------------------------------------------------------------------------
# building inputs


def make_builder_spec(cfg: Config, b: dict) -> BuilderSpec:
    cfg.check_keys(b, BUILDER_KEYS, "builder")
    if "kind" not in b or "h" not in b:
        raise cfg.error("builder needs 'kind' and 'h'", "builder")
    extent = b.get("extent", [1.0])
    try:
        return BuilderSpec(
            kind=b["kind"], extent=tuple(np.atleast_1d(extent).tolist()),
            h=_number(cfg, b["h"], "builder", "h", positive=True),
            anisotropy=b.get("anisotropy"), q=b.get("q"), radius=float(b.get("radius", 6.0)),
            z_ratio=int(b.get("z_ratio", 1)),
        )
    except (InputError, ParameterError) as exc:
        raise cfg.error(str(exc), "builder") from None


def make_space(cfg: Config, conf: dict, base: Path) -> DiscreteSpace:
    if "builder" in conf:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                space = build(make_builder_spec(cfg, conf["builder"]))
            except (InputError, ParameterError) as exc:
                raise cfg.error(str(exc), "builder") from None
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        return space
    s = conf["space"]
    cfg.check_keys(s, SPACE_KEYS, "space")
    if len(s) != 1:
        raise cfg.error("space needs exactly one of 'file', 'inline', 'graph'", "space")
    try:
        if "file" in s:
            p = Path(s["file"])
            return load_space(p if p.is_absolute() else base / p)
        if "inline" in s:
            return space_from_json(s["inline"])
        g = s["graph"]
        cfg.check_keys(g, GRAPH_KEYS, "space", "graph")
        absorbed = None
        if g.get("absorbed"):
            absorbed = np.zeros(len(g["measure"]), dtype=bool)
            absorbed[g["absorbed"]] = True
        edges = [(int(a), int(b), float(w)) for a, b, w in g["edges"]]
        return DiscreteSpace.from_edges(g["measure"], edges, coords=g.get("coords"), absorbed=absorbed)
    except (InputError, ParameterError, KeyError, ValueError, TypeError, OSError) as exc:
        raise cfg.error(f"invalid space: {exc}", "space") from None


def make_domain(cfg: Config, space: DiscreteSpace, d, path=("domain",)) -> Domain:
    if d is None or d == "all":
        return Domain.whole(space)
    cfg.check_keys(d, DOMAIN_KEYS, *path)
    try:
        if "points" in d:
            dom = Domain.from_indices(space, [int(i) for i in d["points"]])
        elif "box" in d:
            if space.coords is None:
                raise InputError("box domains need coordinates")
            lo = np.asarray(d["box"]["lo"], float)
            hi = np.asarray(d["box"]["hi"], float)
            inside = np.all((space.coords >= lo - 1e-12) & (space.coords <= hi + 1e-12), axis=1)
            dom = Domain.from_mask(space, inside)
        elif "ball" in d:
            if space.coords is None:
                raise InputError("ball domains need coordinates")
            ctr = np.asarray(d["ball"]["center"], float)
            r = float(d["ball"]["radius"])
            dom = Domain.from_mask(space, np.linalg.norm(space.coords - ctr, axis=1) <= r + 1e-12)
        else:
            dom = Domain.whole(space)
    except (InputError, KeyError, TypeError, ValueError) as exc:
        raise cfg.error(f"invalid domain: {exc}", *path) from None
    if np.any(dom.mask & space.absorbed):
        dom = Domain.from_mask(space, dom.mask & space.admissible)
    return dom


def make_phi(cfg: Config, p) -> PhiFunctional | str:
    if p is None or p in ("energy", "E"):
        return "energy"
    if isinstance(p, str):
        raise cfg.error(f"unknown objective '{p}'", "phi")
    cfg.check_keys(p, PHI_KEYS, "phi")
    kind = p.get("kind")
    try:
        if kind == "single_k":
            return PhiFunctional.single_k(int(p.get("k", 1)))
        if kind == "weighted_sum":
            return PhiFunctional.weighted_sum(p["weights"])
        if kind == "max_of":
            return PhiFunctional.max_of(p["indices"])
        if kind == "energy":
            return "energy"
    except (ParameterError, KeyError, TypeError) as exc:
        raise cfg.error(f"invalid phi: {exc}", "phi") from None
    raise cfg.error(f"unknown phi kind '{kind}'", "phi", "kind")


# ---------------------------------------------------------------------------
# JSON helpers


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# tasks


def _dom_summary(dom: Domain) -> dict:
    return {"size": dom.size, "measure": dom.measure_value, "points": dom.indices.tolist()}


def task_audit(conf, space, cfg, out):
    rep = audit_axioms(space, trials=conf["trials"], seed=conf["seed"])
    print(rep.table())
    return {"axioms": rep.to_dict(), "n": space.n}, {"exact": 1e-12, "inequality": 1e-10}


def task_solve(conf, space, cfg, out):
    dom = make_domain(cfg, space, conf.get("domain"))
    f = conf["f"]
    try:
        f = float(f) if np.ndim(f) == 0 else np.asarray(f, dtype=float)
        sol = solve_bvp(space, dom, conf["a"], f)
    except (InputError, ParameterError, ValueError, TypeError) as exc:
        raise cfg.error(str(exc), "f" if "f" in conf else "a") from None
    lhs, rhs = sol.apriori_bound(space)
    if conf["output"]["fields"]:
        write_field_csv(out / "field_w.csv", space, sol.w, "w")
    res = {"w": sol.w, "objective": sol.objective, "a": sol.a, "residual_ok": sol.residual <= 1e-10,
           "domain": _dom_summary(dom), "apriori_bound": {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs * (1 + 1e-12)}}
    return res, {"relative_residual": 1e-10, "sign": 1e-12}


def task_spectrum(conf, space, cfg, out):
    dom = make_domain(cfg, space, conf.get("domain"))
    r = eigenvalues(space, dom, conf["k"])
    if conf["output"]["fields"]:
        for j in range(r.finite):
            write_field_csv(out / f"field_u{j + 1}.csv", space, r.eigenfunctions[j], f"u{j + 1}")
    res = r.to_dict()
    res["residuals_ok"] = bool(np.all(r.residuals <= 1e-8 * (1 + r.eigenvalues[: r.finite])))
    res.pop("residuals")
    res["domain"] = _dom_summary(dom)
    return res, {"orthonormality": 1e-9, "residual": "1e-8 (1 + lambda)"}


def task_energy(conf, space, cfg, out):
    dom = make_domain(cfg, space, conf.get("domain"))
    E = dirichlet_energy(space, dom)
    reduced, removed = energy_set_reduce(space, dom, conf["tolerances"]["tau_pos"], report=True)
    return ({"energy": E, "domain": _dom_summary(dom), "energy_set": reduced == dom,
             "removed_measure": removed}, {"identity": 1e-10})


def task_capacity(conf, space, cfg, out):
    dom = make_domain(cfg, space, conf.get("domain"))
    r = capacity(space, dom)
    res = {"capacity": r.value, "domain": _dom_summary(dom), "cap_ge_measure": r.value >= dom.measure_value - 1e-10,
           "potential_min": float(r.potential.min()), "potential_max": float(r.potential.max())}
    if space.n <= 200:
        q = capacity_qp(space, dom)
        res["qp_oracle"] = q.value
        res["oracle_agrees"] = abs(q.value - r.value) <= 1e-8
    if conf.get("h0", False):
        res["h0_equivalence"] = check_h0_equivalence(space, dom)
    if conf["output"]["fields"]:
        write_field_csv(out / "field_potential.csv", space, r.potential, "u")
    return res, {"oracle": 1e-8, "bounds": 1e-10}


def task_optimize(conf, space, cfg, out):
    if "c" not in conf:
        raise cfg.error("optimize needs the measure bound 'c'")
    method = conf["method"]
    if method == "threshold":
        r = threshold_iterate(space, conf["c"], conf["iters"])
    else:
        obj = make_phi(cfg, conf.get("phi"))
        if method == "exhaustive":
            r = exhaustive_optimize(space, obj, conf["c"])
        elif method == "local_search":
            r = local_search_optimize(space, obj, conf["c"], seed=conf["seed"], restarts=conf["restarts"],
                                      max_moves=conf["max_moves"])
        else:
            raise cfg.error(f"unknown method '{method}'", "method")
    return r.to_dict(), {"feasibility": 1e-12, "re_evaluation": 1e-9, "ties": 1e-12}


def _hierarchy(conf, cfg):
    if "builder" not in conf:
        raise cfg.error("gamma studies need a 'builder' section")
    spec = make_builder_spec(cfg, conf["builder"])
    try:
        return build_hierarchy(spec, conf["levels"], seed=conf["seed"])
    except (InputError, ParameterError) as exc:
        raise cfg.error(str(exc), "builder") from None


def task_gamma(conf, space, cfg, out):
    H = _hierarchy(conf, cfg)
    sq = conf.get("sequence", {"kind": "stripes"})
    if isinstance(sq, str):
        sq = {"kind": sq}
    cfg.check_keys(sq, SEQUENCE_KEYS, "sequence")
    kind = sq.get("kind", "stripes")
    if kind == "stripes":
        seq = stripe_sequence(H, axis=int(sq.get("axis", 0)), cells=int(sq.get("cells", 2)))
    elif kind == "constant":
        d0 = make_domain(cfg, H.levels[0], sq.get("domain"), ("sequence", "domain"))
        seq = constant_sequence(H, d0, mode=sq.get("mode", "children"))
    else:
        raise cfg.error(f"unknown sequence kind '{kind}'", "sequence", "kind")
    rep = weak_gamma_analyze(H, seq, k=conf["k"], tau_pos=conf["tolerances"]["tau_pos"])
    res = {"report": rep.to_dict(), "levels": [s.n for s in H.levels]}
    if "enlarge" in conf:
        res["enlarge"] = _enlarge(conf, cfg, H, seq)
    if conf["output"]["fields"]:
        write_field_csv(out / "field_limit.csv", H.finest, rep.limit, "w")
    return res, {"domination": 1e-8, "measure_lsc": 1e-8, "spectral_slack": "10 x Richardson tail"}


def _enlarge(conf, cfg, H, seq):
    e = conf["enlarge"]
    cfg.check_keys(e, ENLARGE_KEYS, "enlarge")
    target = make_domain(cfg, H.levels[0], e.get("target"), ("enlarge", "target"))
    try:
        enl = enlarge_sequence(H, seq, target, e.get("eps", 0.5))
    except (InputError, ParameterError) as exc:
        raise cfg.error(str(exc), "enlarge") from None
    L = H.depth - 1
    before = gamma_distance(H, (seq[-1], L), (target, 0))
    after = gamma_distance(H, (enl[-1], L), (target, 0))
    return {"distance_before": before, "distance_after": after, "improved": after < before}


def _per_level(cfg, v, depth, *path):
    vals = [v] * depth if np.ndim(v) == 0 else list(v)
    if len(vals) != depth:
        raise cfg.error(f"need one value per level ({depth})", *path)
    return [float(x) for x in vals]


def task_perforated(conf, space, cfg, out):
    H = _hierarchy(conf, cfg)
    holes = conf.get("holes")
    if holes is None:
        raise cfg.error("perforated needs a 'holes' section")
    cfg.check_keys(holes, HOLES_KEYS, "holes")
    eps = _per_level(cfg, holes.get("eps", 0.0), H.depth, "holes", "eps")
    rad = _per_level(cfg, holes.get("radius", 0.0), H.depth, "holes", "radius")
    try:
        rep = perforated_study(H, eps, rad, k=conf["k"], tau_pos=conf["tolerances"]["tau_pos"])
    except InputError as exc:
        raise cfg.error(str(exc), "holes") from None
    res = {"report": rep.to_dict(), "levels": [s.n for s in H.levels]}
    if "enlarge" in conf:
        from .gamma import perforated_sequence

        res["enlarge"] = _enlarge(conf, cfg, H, perforated_sequence(H, eps, rad))
    return res, {"domination": 1e-8, "gap_threshold": "0.05 max w_full"}


RUNNERS = {
    "audit": task_audit, "solve": task_solve, "spectrum": task_spectrum, "energy": task_energy,
    "capacity": task_capacity, "optimize": task_optimize, "gamma-study": task_gamma,
    "perforated": task_perforated,
}


def run(task: str, config_path, out_dir=None, overrides: dict | None = None) -> dict:
    """Execute one task; returns the result document written to ``result.json``."""
    t0 = time.perf_counter()
    cfg = Config.load(config_path)
    conf = resolve(cfg, task, overrides or {})
    out = Path(out_dir) if out_dir is not None else Path(config_path).with_suffix("").parent / (
        Path(config_path).stem + "-" + task)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(config_path).resolve().parent
    space = None
    if task not in ("gamma-study", "perforated"):
        space = make_space(cfg, conf, base)
        if conf["output"].get("matrix_market"):
            export_form_matrix(space, out / "form.mtx", comment="a(u,v) = u^T K v")
    body, tolerances = RUNNERS[task](conf, space, cfg, out)
    result = jsonable({"task": task, "seed": conf["seed"], "result": body})
    dump_json(out / "result.json", result)
    manifest = {
        "config": conf,
        "config_file": str(config_path),
        "seed": conf["seed"],
        "tolerances": {**conf["tolerances"], **tolerances},
        "versions": {"mmshape": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "pyyaml": yaml.__version__},
        "wall_time_s": time.perf_counter() - t0,
    }
    dump_json(out / "manifest.json", manifest)
    return result


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmshape", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task, help=f"run the {task} task")
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output directory (default: <config stem>-<task>)")
        p.add_argument("--levels", type=int, help="hierarchy depth for gamma studies")
        p.add_argument("--c", type=float, help="measure bound for optimize")
        p.add_argument("--k", type=int, help="number of eigenvalues")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "levels": args.levels, "c": args.c, "k": args.k}
    try:
        result = run(args.task, args.config, args.out, overrides)
    except ConfigError as exc:
        where = f"{args.config}:{exc.line}" if exc.line else str(args.config)
        print(f"{where}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResourceError as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (InputError, ParameterError, OSError) as exc:
        print(f"{args.config}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"task": result["task"], "out": str(args.out) if args.out else None}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
