"""``meshgan`` command-line interface.

Subcommands: ``synth``, ``hierarchy``, ``train``, ``generate``, ``evaluate``
and ``interpolate``. Settings come from an optional YAML file with one
section per subcommand family (see ``DEFAULTS``); command-line flags and
``--set section.key=value`` override the file. Every run writes its outputs
and a ``config.yaml`` echo of the fully resolved settings into
``<out>/<timestamp>-seed<seed>/``; passing that echo back through
``--config`` with the same positional inputs repeats the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. ``MESHGAN_LOG_LEVEL`` sets the log verbosity.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import logging
import os
import shutil
import sys

import numpy as np
import yaml

from meshgan.diffcore import NonFiniteError
from meshgan.evaluation import (
    Generator,
    compose_identity_expression,
    fid_score,
    generalisation,
    mix_latent,
    specificity,
)
from meshgan.hierarchy import HierarchyError, build_hierarchy, load_hierarchy, save_hierarchy, write_level_objs
from meshgan.laplacian import ConvergenceError, eigendecomposition
from meshgan.mesh import MeshError, load_mesh, save_mesh
from meshgan.models import CheckpointError, load_checkpoint
from meshgan.synthdata import SynthConfig, generate_dataset, read_dataset, write_dataset
from meshgan.training import TrainConfig, TrainingDiverged, train_autoencoder, train_began

__all__ = ["main", "DEFAULTS", "ConfigError", "resolve_config", "parse_grid"]

log = logging.getLogger("meshgan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "synth": {
        "template_level": 3,
        "n_identities": 300,
        "identity_factors": 6,
        "identity_amplitude": 4.0,
        "n_expressions": 0,
        "expression_bumps": 3,
        "expression_width": 18.0,
        "expression_amplitude": 5.0,
        "expression_smoothing_iterations": 0,
        "train_fraction": 0.9,
        "seed": 0,
    },
    "hierarchy": {"levels": 4, "factor": 4.0},
    "train": {
        "mode": "began",
        "data": "identity",
        "gamma": 0.7,
        "lambda_k": 0.001,
        "lr": 0.008,
        "lr_decay": 0.99,
        "momentum": 0.9,
        "epochs": 300,
        "batch_size": 16,
        "latent_dim": 64,
        "seed": 0,
        "skip_connections": False,
        "widths": [16, 16, 16, 32],
        "K": 6,
    },
    "eval": {
        "metrics": "gen,spec,fid",
        "data": "identity",
        "restarts": 5,
        "iterations": 500,
        "inversion_lr": 0.05,
        "spec_samples": 1000,
        "fid_samples": 1000,
        "fid_modes": 16,
        "seed": 0,
    },
    "generate": {"count": 10, "seed": 0},
    "interpolate": {"grid": "0:1:0.25", "expression_grid": "0:1:0.5", "seed": 0},
}

METRICS = ("gen", "spec", "fid")
# written into every config echo; skipped when an echo is read back as a config file
ECHO_KEYS = ("command", "inputs")


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _check_type(section, key, value, default, problems):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
            return value
        return float(value)
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            problems.append(f"{where}: expected a list of integers, got {value!r}")
    elif isinstance(default, str) and not isinstance(value, str):
        problems.append(f"{where}: expected a string, got {value!r}")
    return value


def resolve_config(file_values: dict | None, overrides: dict | None = None) -> dict:
    """Merge defaults, file values and overrides (later wins), validating every key.

    ``overrides`` maps ``"section.key"`` to a value. All problems are
    collected and raised together as one :class:`ConfigError`.
    """
    resolved = copy.deepcopy(DEFAULTS)
    problems = []
    layers = []
    if file_values:
        if not isinstance(file_values, dict):
            raise ConfigError([f"configuration must be a mapping of sections, got {type(file_values).__name__}"])
        for section, values in file_values.items():
            if section in ECHO_KEYS:
                continue
            if section not in DEFAULTS:
                problems.append(f"unknown section {section!r}")
                continue
            if not isinstance(values, dict):
                problems.append(f"section {section!r} must be a mapping")
                continue
            layers.extend((section, k, v) for k, v in values.items())
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or not key:
            problems.append(f"unknown key '{dotted}'")
            continue
        layers.append((section, key, value))
    for section, key, value in layers:
        if key not in DEFAULTS[section]:
            problems.append(f"unknown key '{section}.{key}'")
            continue
        resolved[section][key] = _check_type(section, key, value, DEFAULTS[section][key], problems)
    if not problems:
        # value checks only make sense once every key and type is valid
        problems.extend(_semantic_problems(resolved))
    if problems:
        raise ConfigError(problems)
    return resolved


def _semantic_problems(cfg: dict) -> list:
    problems = []
    if cfg["train"]["mode"] not in ("began", "ae"):
        problems.append(f"train.mode: expected 'began' or 'ae', got {cfg['train']['mode']!r}")
    for section in ("train", "eval"):
        if cfg[section]["data"] not in ("identity", "expression"):
            problems.append(f"{section}.data: expected 'identity' or 'expression', got {cfg[section]['data']!r}")
    metrics = [m.strip() for m in str(cfg["eval"]["metrics"]).split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        problems.append(f"eval.metrics: expected a comma list drawn from {','.join(METRICS)}, got {cfg['eval']['metrics']!r}")
    for key in ("grid", "expression_grid"):
        try:
            parse_grid(cfg["interpolate"][key])
        except ValueError as exc:
            problems.append(f"interpolate.{key}: {exc}")
    try:
        SynthConfig(**cfg["synth"])
    except (ValueError, TypeError) as exc:
        problems.append(f"synth: {exc}")
    try:
        _train_config(cfg)
    except (ValueError, TypeError) as exc:
        problems.append(f"train: {exc}")
    return problems


def _train_config(cfg: dict) -> TrainConfig:
    values = {k: v for k, v in cfg["train"].items() if k not in ("mode", "data")}
    values["widths"] = tuple(values["widths"])
    return TrainConfig(**values)


def parse_grid(spec: str) -> np.ndarray:
    """``"start:stop:step"`` -> inclusive grid, e.g. ``"0:1:0.5"`` -> [0, 0.5, 1]."""
    parts = str(spec).split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like start:stop:step, got {spec!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ValueError(f"grid values must be numbers, got {spec!r}") from None
    if step <= 0 or stop < start:
        raise ValueError(f"grid needs step > 0 and stop >= start, got {spec!r}")
    count = int(np.floor((stop - start) / step + 1e-9)) + 1
    grid = start + step * np.arange(count)
    return np.round(grid, 12)


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError([f"--set expects section.key=value, got {item!r}"])
        value = yaml.safe_load(raw)
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        out[key.strip()] = value
    return out


def _load_config_file(path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: invalid YAML ({exc})"]) from None


def _run_dir(base: str, seed: int) -> str:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    path = os.path.join(base, f"{stamp}-seed{seed}")
    suffix = 1
    while os.path.exists(path):
        path = os.path.join(base, f"{stamp}-seed{seed}-{suffix}")
        suffix += 1
    os.makedirs(path)
    return path


def _echo(run_dir: str, command: str, inputs: dict, cfg: dict, sections) -> None:
    echo = {"command": command, "inputs": inputs}
    echo.update({s: cfg[s] for s in sections})
    with open(os.path.join(run_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(echo, fh, sort_keys=True)


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg) -> str:
    config = SynthConfig(**cfg["synth"])
    run = _run_dir(args.out, config.seed)
    dataset = generate_dataset(config)
    write_dataset(dataset, run)
    _echo(run, "synth", {}, cfg, ["synth"])
    return run


def cmd_hierarchy(args, cfg) -> str:
    template = load_mesh(_require(args.template, "template mesh"))
    levels, factor = cfg["hierarchy"]["levels"], cfg["hierarchy"]["factor"]
    run = _run_dir(args.out, 0)
    h = build_hierarchy(template, levels=levels, factor=factor)
    save_hierarchy(h, os.path.join(run, "hierarchy.npz"))
    write_level_objs(h, run)
    _echo(run, "hierarchy", {"template": os.path.abspath(args.template)}, cfg, ["hierarchy"])
    log.info("hierarchy sizes %s", h.sizes)
    return run


def _dataset_split(path: str, kind: str):
    dataset = read_dataset(_require(path, "dataset directory"))
    train, test = dataset.split(kind)
    if len(train) == 0:
        raise MeshError(f"dataset {path} has no {kind} training meshes")
    return dataset, train, test


def cmd_train(args, cfg) -> str:
    tcfg = cfg["train"]
    config = _train_config(cfg)
    hierarchy = load_hierarchy(_require(args.hierarchy, "hierarchy file"))
    dataset, train, _ = _dataset_split(args.dataset, tcfg["data"])
    if not dataset.template.same_topology(hierarchy.template):
        raise HierarchyError("dataset template and hierarchy template differ in topology")
    run = _run_dir(args.out, config.seed)
    _echo(run, "train", {"dataset": os.path.abspath(args.dataset), "hierarchy": os.path.abspath(args.hierarchy)},
          cfg, ["train"])
    trainer = train_began if tcfg["mode"] == "began" else train_autoencoder
    trainer(train, config, hierarchy, out_dir=run)
    final = os.path.join(run, f"checkpoint_epoch{config.epochs:04d}.npz")
    if os.path.exists(final):
        shutil.copyfile(final, os.path.join(run, "final.npz"))
    return run


def _generator(path: str, hierarchy):
    ckpt = load_checkpoint(_require(path, "checkpoint"), hierarchy)
    return Generator.from_checkpoint(ckpt, hierarchy)


def _write_objs(run: str, template, meshes, names) -> None:
    for name, v in zip(names, meshes):
        save_mesh(template.with_vertices(v), os.path.join(run, name))


def cmd_generate(args, cfg) -> str:
    gcfg = cfg["generate"]
    hierarchy = load_hierarchy(_require(args.hierarchy, "hierarchy file"))
    gen = _generator(args.checkpoint, hierarchy)
    template = hierarchy.template
    rng = np.random.default_rng(gcfg["seed"])
    meshes = gen.decode(gen.sample_latents(rng, gcfg["count"], standard=True))
    if args.expression:
        expr_gen = _generator(args.expression, hierarchy)
        expressions = expr_gen.decode(expr_gen.sample_latents(rng, gcfg["count"], standard=True))
        meshes = compose_identity_expression(meshes, expressions, template.vertices)
    run = _run_dir(args.out, gcfg["seed"])
    inputs = {"checkpoint": os.path.abspath(args.checkpoint), "hierarchy": os.path.abspath(args.hierarchy)}
    if args.expression:
        inputs["expression"] = os.path.abspath(args.expression)
    _echo(run, "generate", inputs, cfg, ["generate"])
    _write_objs(run, template, meshes, [f"sample_{i:04d}.obj" for i in range(len(meshes))])
    return run


def _table(reports) -> str:
    lines = [f"{'metric':<16}{'mean':>14}{'std':>14}{'samples':>10}"]
    for name, rep in reports:
        if isinstance(rep, float):
            lines.append(f"{name:<16}{rep:>14.6f}{'':>14}{'':>10}")
        else:
            lines.append(f"{name:<16}{rep.mean:>14.6f}{rep.std:>14.6f}{len(rep.per_sample):>10d}")
    return "\n".join(lines)


def cmd_evaluate(args, cfg) -> str:
    ecfg = cfg["eval"]
    metrics = [m.strip() for m in ecfg["metrics"].split(",") if m.strip()]
    hierarchy = load_hierarchy(_require(args.hierarchy, "hierarchy file"))
    gen = _generator(args.checkpoint, hierarchy)
    dataset, train, test = _dataset_split(args.dataset, ecfg["data"])
    if len(test) == 0:
        raise MeshError(f"dataset {args.dataset} has no {ecfg['data']} test meshes")
    if not gen.bounded:
        gen.fit_latent_distribution(train)
    run = _run_dir(args.out, ecfg["seed"])
    _echo(run, "evaluate", {"checkpoint": os.path.abspath(args.checkpoint),
                            "hierarchy": os.path.abspath(args.hierarchy),
                            "dataset": os.path.abspath(args.dataset)}, cfg, ["eval"])
    reports, lines = [], []
    for metric in metrics:
        if metric == "gen":
            rep = generalisation(test, gen, restarts=ecfg["restarts"], iterations=ecfg["iterations"],
                                 lr=ecfg["inversion_lr"], seed=ecfg["seed"])
            reports.append(("generalisation", rep))
            lines.append(rep.to_json())
        elif metric == "spec":
            rep = specificity(gen, test, n_samples=ecfg["spec_samples"], seed=ecfg["seed"])
            reports.append(("specificity", rep))
            lines.append(rep.to_json())
        else:
            basis = eigendecomposition(hierarchy.spectral_ops[0].W, hierarchy.spectral_ops[0].mass,
                                       k=ecfg["fid_modes"])
            rng = np.random.default_rng(ecfg["seed"])
            samples = gen.decode(gen.sample_latents(rng, ecfg["fid_samples"], standard=True))
            value = fid_score(train, samples, basis, hierarchy.template, m=ecfg["fid_modes"])
            reports.append(("fid", value))
            lines.append(json.dumps({"metric": "fid", "value": value, "mode": gen.mode,
                                     "n_real": len(train), "n_generated": len(samples),
                                     "modes": ecfg["fid_modes"], "seed": ecfg["seed"]}, sort_keys=True))
    with open(os.path.join(run, "report.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print(_table(reports))
    return run


def cmd_interpolate(args, cfg) -> str:
    icfg = cfg["interpolate"]
    hierarchy = load_hierarchy(_require(args.hierarchy, "hierarchy file"))
    gen = _generator(args.checkpoint, hierarchy)
    template = hierarchy.template
    rng = np.random.default_rng(icfg["seed"])
    z1, z2 = gen.sample_latents(rng, 2, standard=True)
    fs = parse_grid(icfg["grid"])
    identities = gen.decode(np.stack([mix_latent(z1, z2, f) for f in fs]))
    run = _run_dir(args.out, icfg["seed"])
    inputs = {"checkpoint": os.path.abspath(args.checkpoint), "hierarchy": os.path.abspath(args.hierarchy)}
    names, meshes = [], []
    if args.expression:
        inputs["expression"] = os.path.abspath(args.expression)
        egen = _generator(args.expression, hierarchy)
        e1, e2 = egen.sample_latents(rng, 2, standard=True)
        gs = parse_grid(icfg["expression_grid"])
        expressions = egen.decode(np.stack([mix_latent(e1, e2, g) for g in gs]))
        for i, f in enumerate(fs):
            for j, g in enumerate(gs):
                meshes.append(compose_identity_expression(identities[i], expressions[j], template.vertices))
                names.append(f"interp_{i:03d}_{j:03d}.obj")
    else:
        meshes = list(identities)
        names = [f"interp_{i:03d}.obj" for i in range(len(fs))]
    _echo(run, "interpolate", inputs, cfg, ["interpolate"])
    _write_objs(run, template, meshes, names)
    grid = {"f_id": fs.tolist(), "files": names}
    if args.expression:
        grid["f_exp"] = parse_grid(icfg["expression_grid"]).tolist()
    with open(os.path.join(run, "grid.json"), "w", encoding="utf-8") as fh:
        json.dump(grid, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return run


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshgan", description="Spectral mesh GAN toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, section):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one setting")
        p.add_argument("--out", default="runs", help="parent directory for the run directory")
        if section is not None and "seed" in DEFAULTS[section]:
            p.add_argument("--seed", type=int, help=f"shortcut for {section}.seed")
        p.set_defaults(section=section)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, "synth")
    p = sub.add_parser("hierarchy", help="build the pooling hierarchy of a template")
    p.add_argument("template")
    p.add_argument("--levels", type=int)
    p.add_argument("--factor", type=float)
    common(p, "hierarchy")
    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--mode", choices=("began", "ae"))
    p.add_argument("--epochs", type=int)
    common(p, "train")
    p = sub.add_parser("generate", help="sample meshes from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--expression", help="expression checkpoint to compose with each identity")
    common(p, "generate")
    p = sub.add_parser("evaluate", help="compute metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", help="comma list from gen,spec,fid")
    common(p, "eval")
    p = sub.add_parser("interpolate", help="decode a grid of mixed latents")
    p.add_argument("checkpoint")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--grid", help="start:stop:step for the identity factor")
    p.add_argument("--expression", help="expression checkpoint for a two-factor grid")
    p.add_argument("--expression-grid", dest="expression_grid", help="start:stop:step for the expression factor")
    common(p, "interpolate")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "hierarchy": cmd_hierarchy,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "interpolate": cmd_interpolate,
}

_FLAG_KEYS = {
    "levels": "levels", "factor": "factor", "mode": "mode", "epochs": "epochs", "count": "count",
    "metrics": "metrics", "grid": "grid", "expression_grid": "expression_grid", "seed": "seed",
}


def _overrides(args) -> dict:
    out = _parse_set(args.set)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None and args.section is not None and key in DEFAULTS[args.section]:
            out[f"{args.section}.{key}"] = value
    return out


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MESHGAN_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(_load_config_file(args.config), _overrides(args))
        run = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"meshgan: configuration error: {'; '.join(exc.problems)}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ConvergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"meshgan: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MeshError, HierarchyError, CheckpointError, FileNotFoundError, KeyError, OSError, ValueError) as exc:
        print(f"meshgan: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(run)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
