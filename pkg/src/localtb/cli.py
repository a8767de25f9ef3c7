"""Command line: run verification suites from a JSON configuration.

Every artifact embeds the resolved configuration; floats are written with 17
significant digits so reruns with the same configuration are byte-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import pairing as pr
from . import suites as st
from .czo import DENSE_LIMIT, discretize, kernel_from_config
from .geometry import GridPartition, build_grid, random_shift
from .instances import Instance, InstanceSpec, jittered_mesh
from .measure import DiscreteMeasure, cantor_measure, load_measure, point_mass_mixture, uniform_measure
from .stopping import build_stopping
from .testfns import FamilyStrategy, TestFunctionFamily, constants, make_family, random_custom_records

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "measure": {"generator": "jittered", "atoms_per_side": 64, "half_width": 1.0, "jitter": 0.3},
    "kernel": {"name": "cauchy"},
    "family": {"kind": "custom", "amplitude": 1.0, "resolution": 2},
    "grid": {"N": 0, "depth": 6, "dimension": 1, "shift": "random"},
    "params": {"lam": 8.0, "beta": 4, "gamma": None, "r": 3, "theta": 2.0**-8, "sigma": 2.0**-12, "u": 0.125},
    "pairing": {"depth": 7, "q0_side": 1.0, "measure": "uniform", "family": "custom", "amplitude": 0.5,
                "eta": 0.25, "functions": "random"},
    "trials": {"verify-kernel": 2000, "growth": 1, "stopping": 20, "martingale": 8, "mc-goodbad": 256,
               "surgery": 4, "pairing": 32},
    "thresholds": {"growth_bound": None},
    "suites": ["all"],
    "output": {"dir": "localtb-out"},
}

# keys accepted inside each section beyond the defaults
_EXTRA_KEYS = {
    "measure": {"path", "lo", "hi", "ratio", "levels", "n_heavy", "heavy_factor", "m", "density_cells"},
    "kernel": {"m", "scale", "size_exponent", "path", "alpha", "C"},
    "family": {"eta", "seed", "signs_resolution", "path"},
}


class ConfigError(click.ClickException):
    exit_code = 2


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"configuration key {k} must be an object")
            if k in _EXTRA_KEYS:
                out[k] = _merge_section(base[k], v, k)
            else:
                unknown = set(v) - set(base[k])
                if unknown:
                    raise ConfigError(f"unknown configuration key {k}.{sorted(unknown)[0]}")
                out[k].update(v)
        else:
            out[k] = v
    return out


def _merge_section(base: dict, over: dict, where: str) -> dict:
    allowed = set(base) | _EXTRA_KEYS[where]
    unknown = set(over) - allowed
    if unknown:
        raise ConfigError(f"unknown configuration key {where}.{sorted(unknown)[0]}")
    # a different generator or kind does not inherit the default's options
    tag = {"measure": "generator", "family": "kind", "kernel": "name"}[where]
    if over.get(tag, base.get(tag)) != base.get(tag):
        return {tag: over[tag], **{k: v for k, v in over.items() if k != tag}}
    return {**base, **over}


def resolve_config(doc: dict | None, seed=None, trials=None, out=None, suites=None) -> dict:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported configuration version {doc.get('version')!r}")
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["output"]["dir"] = str(out)
    if suites:
        cfg["suites"] = list(suites)
    if trials is not None:
        cfg["trials_override"] = int(trials)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if not (isinstance(cfg["seed"], int) and 0 <= cfg["seed"] < 2**64):
        raise ConfigError("seed must be an integer in [0, 2^64)")
    for s in cfg["suites"]:
        if s != "all" and s not in st.SUITE_NAMES:
            raise ConfigError(f"unknown suite {s!r}")
    g = cfg["grid"]
    if g["dimension"] < 1 or g["depth"] < 1:
        raise ConfigError("grid dimension and depth must be positive")
    try:
        make_params(cfg)
        kernel = kernel_from_config(cfg["kernel"], g["dimension"])
        scenario = make_scenario(cfg)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    derived = pr.Params(**{**cfg["params"], "gamma": None}).gamma_for(kernel)
    if cfg["params"]["gamma"] is not None and cfg["params"]["gamma"] > derived:
        raise ConfigError(f"gamma {cfg['params']['gamma']} exceeds the kernel's admissible value {derived:.17g}")
    n_pair = scenario.atoms_per_side ** scenario.dimension
    if n_pair > DENSE_LIMIT:
        raise ConfigError(f"pairing depth {scenario.depth} needs {n_pair} atoms, above the dense limit {DENSE_LIMIT}")
    m = cfg["measure"]
    if m.get("generator") in ("jittered", "uniform", "point_mass"):
        n = int(m.get("atoms_per_side", 0)) ** g["dimension"]
        if n > DENSE_LIMIT:
            raise ConfigError(f"measure has {n} atoms, above the dense limit {DENSE_LIMIT}")


def make_params(cfg: dict) -> pr.Params:
    return pr.Params(**cfg["params"])


def make_scenario(cfg: dict, seed: int | None = None) -> pr.Scenario:
    p, k = cfg["pairing"], cfg["kernel"]
    return pr.Scenario(dimension=cfg["grid"]["dimension"], q0_side=float(p["q0_side"]), depth=int(p["depth"]),
                       kernel=k.get("name", "cauchy"), kernel_scale=float(k.get("scale", 1.0)),
                       measure=p["measure"], family=p["family"], amplitude=float(p["amplitude"]),
                       eta=float(p["eta"]), functions=p["functions"],
                       seed=cfg["seed"] if seed is None else seed)


def make_measure(cfg: dict, seed: int) -> DiscreteMeasure:
    m, dim = cfg["measure"], cfg["grid"]["dimension"]
    gen = m.get("generator")
    if gen == "jittered":
        return jittered_mesh(seed, int(m["atoms_per_side"]), dim, float(m.get("jitter", 0.3)),
                             density_cells=m.get("density_cells", 16), half_width=float(m.get("half_width", 1.0)))
    if gen == "uniform":
        return uniform_measure(int(m["atoms_per_side"]), m.get("lo", -1.0), m.get("hi", 1.0), dim, m.get("m"))
    if gen == "cantor":
        return cantor_measure(float(m["ratio"]), int(m["levels"]), m.get("lo", -1.0), m.get("hi", 1.0), dim)
    if gen == "point_mass":
        return point_mass_mixture(int(m["atoms_per_side"]), int(m.get("n_heavy", 4)), float(m.get("heavy_factor", 8.0)),
                                  m.get("lo", -1.0), m.get("hi", 1.0), dim, seed, m.get("m"))
    if gen == "file":
        return load_measure(m["path"])
    raise ConfigError(f"unknown measure generator {gen!r}")


def make_instance(cfg: dict, seed: int) -> Instance:
    """Measure, grid, family, operator and stopping tree for one seed of the configuration."""
    g, fcfg = cfg["grid"], cfg["family"]
    mu = make_measure(cfg, seed)
    if g["shift"] == "random":
        shift = random_shift(np.random.default_rng([seed, 3]), g["N"], g["dimension"])
    else:
        shift = g["shift"]
    grid = build_grid(shift, g["N"], g["depth"], g["dimension"])
    part = GridPartition(grid, mu.points)
    kind = fcfg.get("kind", "indicator")
    if kind == "custom" and "path" not in fcfg:
        recs = random_custom_records(part, float(fcfg.get("amplitude", 1.0)), seed, fcfg.get("resolution"), mu.points)
        fam = TestFunctionFamily(FamilyStrategy("custom", records=recs), grid, mu, "T", part)
    else:
        spec = {k: v for k, v in fcfg.items() if k not in ("amplitude", "resolution")}
        spec.setdefault("seed", seed)
        fam = make_family(spec, grid, mu, part=part)
    op = discretize(kernel_from_config(cfg["kernel"], g["dimension"]), mu)
    c = constants(fam, op)
    tree = build_stopping(fam, op, c.A, c.B)
    ispec = InstanceSpec(seed=seed, dimension=g["dimension"], depth=g["depth"],
                         atoms_per_side=int(cfg["measure"].get("atoms_per_side", 0)), family=kind,
                         kernel=cfg["kernel"].get("name", "cauchy"))
    return Instance(ispec, mu, grid, part, fam, op, c, tree)


def _trials(cfg: dict, suite: str) -> int:
    return int(cfg.get("trials_override", cfg["trials"][suite]))


def _workers(n: int) -> int:
    cap = os.environ.get("NHT_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n))


def run_suite(name: str, cfg: dict) -> tuple[st.SuiteResult, dict | None]:
    seed = cfg["seed"]
    n = _trials(cfg, name)
    if name == "verify-kernel":
        mu = make_measure(cfg, seed)
        return st.kernel_suite(kernel_from_config(cfg["kernel"], cfg["grid"]["dimension"]), mu, n, seed), None
    if name == "growth":
        return st.growth_suite(make_measure(cfg, seed), cfg["thresholds"]["growth_bound"]), None
    if name in ("stopping", "martingale"):
        insts = [make_instance(cfg, s) for s in range(seed, seed + n)]
        if name == "stopping":
            return st.stopping_suite(insts), None
        return st.martingale_suite(insts, seed), None
    params = make_params(cfg)
    scenario = make_scenario(cfg)
    if name == "mc-goodbad":
        k = kernel_from_config(cfg["kernel"], cfg["grid"]["dimension"])
        return st.goodbad_suite(params.gamma_for(k), params.r, n, seed, scenario=scenario, params=params), None
    if name == "surgery":
        return st.surgery_suite(seeds=(seed,), trials=n, scenario=scenario, params=params), None
    if name == "pairing":
        res, rep = st.pairing_suite(scenario, params, n, workers=_workers(n))
        return res, rep.to_dict()
    raise ConfigError(f"unknown suite {name!r}")


# deterministic writers --------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return '"nan"'
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return format(v, ".17g")
    return json.dumps(v)


def to_json(obj, indent: int = 0) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple, np.ndarray)) for x in seq):
            return "[" + ", ".join(fmt(x) for x in seq) + "]"
        return "[\n" + ",\n".join(inner + to_json(x, indent + 1) for x in seq) + "\n" + pad + "]"
    if obj is None:
        return "null"
    return fmt(obj)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (dict, list, tuple)):
        return to_json(v).replace("\n", " ")
    return str(v)


def to_csv(rows: list[dict]) -> str:
    keys: list = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(keys)
    for r in rows:
        wr.writerow([_cell(r.get(k, "")) for k in keys])
    return buf.getvalue()


def write_outputs(out_dir: Path, cfg: dict, results: list[tuple[st.SuiteResult, dict | None]]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    for res, extra in results:
        doc = {"config": cfg, "suite": res.name, "passed": res.passed, "metrics": res.metrics,
               "notes": res.notes, "rows": res.rows}
        if extra is not None:
            doc["report"] = extra
        (out_dir / f"{res.name}.json").write_text(to_json(doc) + "\n")
        (out_dir / f"{res.name}.csv").write_text(to_csv(res.rows) if res.rows else "")
        for k, v in res.metrics.items():
            summary.append({"suite": res.name, "passed": res.passed, "metric": k, "value": v})
    (out_dir / "summary.csv").write_text(to_csv(summary))
    (out_dir / "config.json").write_text(to_json(cfg) + "\n")


def execute(names: list[str], cfg: dict) -> int:
    results = []
    for name in names:
        res, extra = run_suite(name, cfg)
        click.echo(res.line())
        for note in res.notes:
            click.echo(f"  note: {note}")
        results.append((res, extra))
    write_outputs(Path(cfg["output"]["dir"]), cfg, results)
    return 0 if all(r.passed for r, _ in results) else 1


def _load(path) -> dict | None:
    if path is None:
        return None
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def _common(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      help="JSON configuration file.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Base seed (overrides the config).")(fn)
    fn = click.option("--trials", type=click.IntRange(1), help="Trial or instance count for the suite.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), help="Output directory.")(fn)
    return fn


@click.group()
def main():
    """Numerical verification suites for local Tb constructions on atomic measures."""


def _subcommand(name: str):
    @_common
    def cmd(config_path, seed, trials, out):
        cfg = resolve_config(_load(config_path), seed, trials, out, [name])
        sys.exit(execute([name], cfg))

    cmd.__doc__ = f"Run the {name} suite."
    main.command(name)(cmd)


for _name in st.SUITE_NAMES:
    _subcommand(_name)


@main.command("all")
@_common
@click.option("--suite", "suite", multiple=True, type=click.Choice(st.SUITE_NAMES),
              help="Restrict to these suites (repeatable).")
def run_all(config_path, seed, trials, out, suite):
    """Run every suite, or those named with --suite."""
    cfg = resolve_config(_load(config_path), seed, trials, out, list(suite) or None)
    names = [s for s in st.SUITE_NAMES if "all" in cfg["suites"] or s in cfg["suites"]]
    sys.exit(execute(names, cfg))


if __name__ == "__main__":
    main()
