"""Command-line interface: ``latentreg <command> ...``.

Every command writes its fully resolved options to a JSON echo file. Running
``latentreg rerun <echo.json>`` repeats the command with exactly those
options.

Exit codes: 0 success, 2 configuration error, 3 data error (views, truth,
grid), 4 model error, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .cloud import CloudFormatError, read_cloud
from .degrade import SHAPES, DegradationModel, generate_views, load_truth, load_viewset, make_shape, save_viewset
from .descriptor import ModelFormatError, TrainConfig, load_model, save_model, train, write_train_log
from .eval import pairwise_rre, write_summary
from .register import GridFormatError, RegConfig, build_rotation_grid, load_rotation_grid, register, write_result

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL, EXIT_RUNTIME = 0, 2, 3, 4, 5

log = logging.getLogger("latentreg")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config_error(msg):
    return CliError(msg, EXIT_CONFIG)


def _write_echo(path: Path, command: str, args: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"command": command, "args": args}, indent=2, sort_keys=True))


def _read_json(path, what: str, code: int) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}", code) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}", code) from None


def _check_keys(d: dict, allowed, required=(), where="config") -> None:
    if not isinstance(d, dict):
        raise _config_error(f"{where} must be a JSON object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise _config_error(f"{where}: unknown key(s): {', '.join(unknown)}")
    for key in required:
        if key not in d:
            raise _config_error(f"{where}: missing required key '{key}'")


def _floats(text: str, n: int | None = None, name: str = "value") -> list[float]:
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise _config_error(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise _config_error(f"--{name}: expected {n} values, got {len(vals)}")
    return vals


# -- grid ------------------------------------------------------------------------------

def cmd_grid_build(a: dict) -> None:
    out = Path(a["out"])
    if out.exists() and not a["force"]:
        raise _config_error(f"{out} exists; pass --force to overwrite")
    try:
        grid = build_rotation_grid(a["L"], a["k"], a["seed"])
    except ValidationError as exc:
        raise _config_error(str(exc)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    grid.save(out)
    _write_echo(out.with_name(out.name + ".config.json"), "grid build", {**a, "force": True})
    print(f"wrote {out} (L={grid.size}, k={grid.k})")


# -- train -----------------------------------------------------------------------------

TRAIN_REQUIRED = ("seed",)


def resolve_train_config(d: dict) -> TrainConfig:
    allowed = TrainConfig.__dataclass_fields__.keys()
    _check_keys(d, allowed, TRAIN_REQUIRED, where="train config")
    try:
        return TrainConfig(**d)
    except (TypeError, ValidationError) as exc:
        raise _config_error(f"train config: {exc}") from None


def cmd_train(a: dict) -> None:
    raw = a["config_data"] if a.get("config_data") is not None else _read_json(a["config"], "config", EXIT_CONFIG)
    cfg = resolve_train_config(raw)
    out = Path(a["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result = train(cfg, progress=lambda row: log.info("epoch %(epoch)d loss %(loss).5f lr %(lr).2e", row))
    save_model(result.model, out)
    write_train_log(out.parent / "train_log.csv", result.history)
    (out.parent / "train_metrics.json").write_text(
        json.dumps({"validation_chamfer": result.validation}, indent=2))
    _write_echo(out.parent / "train_config.json", "train",
                {"config_data": cfg.to_dict(), "config": None, "out": str(out)})
    print(f"wrote {out}; validation Chamfer {result.validation:.4f}")


# -- genviews ----------------------------------------------------------------------------

def cmd_genviews(a: dict) -> None:
    sigma = _floats(a["sigma"], 3, "sigma") if isinstance(a["sigma"], str) else list(a["sigma"])
    try:
        degr = DegradationModel.from_axes(*sigma, v=a["v"], o=a["o"], as_variance=a["sigma_as_variance"])
    except ValidationError as exc:
        raise _config_error(str(exc)) from None
    shape = a["shape"]
    if shape in SHAPES:
        ref = make_shape(shape, a["points"], rng=np.random.default_rng([a["seed"], 7]),
                         variation=a["variation"])
    else:
        try:
            ref = read_cloud(shape)
        except (FileNotFoundError, CloudFormatError, ValidationError) as exc:
            raise CliError(f"cannot read shape {shape!r}: {exc}", EXIT_DATA) from None
    if a["n"] < 2:
        raise _config_error("--n must be at least 2")
    vs = generate_views(ref, a["n"], degr, np.random.default_rng(a["seed"]),
                        rotation_mode=a["rotation_mode"])
    out = Path(a["out"])
    meta = {"shape": shape, "n": a["n"], "sigma": sigma, "sigma_as_variance": a["sigma_as_variance"],
            "v": a["v"], "o": a["o"], "seed": a["seed"], "points": a["points"],
            "degradation": degr.to_dict()}
    save_viewset(vs, out, meta)
    _write_echo(out / "genviews_config.json", "genviews", {**a, "sigma": sigma})
    print(f"wrote {a['n']} views to {out}")


# -- register ----------------------------------------------------------------------------

REG_EXTRA = ("sigma", "sigma_as_variance", "v", "o", "thresholds")
REG_REQUIRED = ("seed",)


def resolve_register_config(d: dict, overrides: dict) -> tuple[RegConfig, dict, list]:
    allowed = list(RegConfig.__dataclass_fields__) + list(REG_EXTRA)
    _check_keys(d, allowed, REG_REQUIRED, where="register config")
    d = dict(d)
    extra = {k: d.pop(k) for k in REG_EXTRA if k in d}
    for k, v in overrides.items():
        if v is None:
            continue
        if k in RegConfig.__dataclass_fields__:
            d[k] = v
        else:
            extra[k] = v
    try:
        cfg = RegConfig.from_dict(d)
    except (TypeError, ValidationError) as exc:
        raise _config_error(f"register config: {exc}") from None
    thresholds = extra.get("thresholds", [10.0, 15.0, 30.0])
    if isinstance(thresholds, str):
        thresholds = _floats(thresholds, name="thresholds")
    return cfg, extra, [float(t) for t in thresholds]


def _degradation(extra: dict, fallback: dict | None) -> DegradationModel:
    if not any(k in extra for k in ("sigma", "v", "o")) and fallback:
        return DegradationModel.from_dict(fallback)
    sigma = extra.get("sigma", [0.0, 0.0, 0.0])
    if isinstance(sigma, str):
        sigma = _floats(sigma, 3, "sigma")
    s = np.asarray(sigma, dtype=float)
    try:
        if s.shape == (3,):
            return DegradationModel.from_axes(*s, v=extra.get("v", 1.0), o=extra.get("o", 0.0),
                                              as_variance=extra.get("sigma_as_variance", False))
        return DegradationModel(s.reshape(3, 3), extra.get("v", 1.0), extra.get("o", 0.0))
    except ValidationError as exc:
        raise _config_error(str(exc)) from None


def cmd_register(a: dict) -> None:
    raw = a["config_data"] if a.get("config_data") is not None else _read_json(a["config"], "config", EXIT_CONFIG)
    overrides = {"threads": a.get("threads"), "sigma": a.get("sigma"), "v": a.get("v"), "o": a.get("o")}
    cfg, extra, thresholds = resolve_register_config(raw, overrides)
    try:
        vs = load_viewset(a["views"])
    except (FileNotFoundError, CloudFormatError, ValidationError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load views from {a['views']}: {exc}", EXIT_DATA) from None
    degr = _degradation(extra, vs.meta.get("degradation"))
    try:
        model = load_model(a["model"])
    except FileNotFoundError:
        raise CliError(f"model not found: {a['model']}", EXIT_MODEL) from None
    except ModelFormatError as exc:
        raise CliError(f"bad model file: {exc}", EXIT_MODEL) from None
    try:
        grid = load_rotation_grid(a["grid"])
    except FileNotFoundError:
        raise CliError(f"grid not found: {a['grid']}", EXIT_DATA) from None
    except (GridFormatError, ValidationError) as exc:
        raise CliError(f"bad grid file: {exc}", EXIT_DATA) from None
    if grid.size != cfg.grid_size or grid.k != cfg.grid_neighbors:
        log.info("using grid file sizes L=%d, k=%d", grid.size, grid.k)
        cfg = RegConfig.from_dict({**cfg.to_dict(), "grid_size": grid.size, "grid_neighbors": grid.k})
    z, poses, report = register(vs.views, model, degr, cfg, grid=grid)
    out = Path(a["out"])
    write_result(out, z, poses, report)
    if vs.truth is not None:
        errors = pairwise_rre([p.rotation.T for p in poses], [p.rotation.T for p in vs.truth])
        write_summary(out, errors, thresholds)
    echoed = {**cfg.to_dict(), "sigma": degr.sigma.tolist(), "v": degr.v, "o": degr.o,
              "thresholds": thresholds}
    _write_echo(out / "register_config.json", "register",
                {"views": a["views"], "model": a["model"], "grid": a["grid"], "out": str(out),
                 "config": None, "config_data": echoed, "threads": None, "sigma": None,
                 "v": None, "o": None})
    # wall time differs between runs; keep it out of the reproducible artifacts
    print(f"registered {len(poses)} views in {report.wall_time:.1f}s; rounds {len(report.rounds)}")


# -- eval ----------------------------------------------------------------------------------

def cmd_eval(a: dict) -> None:
    est = _read_json(a["est"], "estimate", EXIT_DATA)
    try:
        est_rot = [np.asarray(p["rotation"], dtype=float).reshape(3, 3) for p in est["poses"]]
        truth = load_truth(a["truth"])
    except FileNotFoundError as exc:
        raise CliError(f"truth not found: {exc}", EXIT_DATA) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed pose file: {exc}", EXIT_DATA) from None
    thresholds = _floats(a["thresholds"], name="thresholds") if isinstance(a["thresholds"], str) \
        else [float(t) for t in a["thresholds"]]
    if not thresholds or any(not t > 0 for t in thresholds):
        raise _config_error("thresholds must be positive")
    if len(est_rot) != len(truth):
        raise CliError(f"estimate has {len(est_rot)} poses, truth has {len(truth)}", EXIT_DATA)
    try:
        errors = pairwise_rre([r.T for r in est_rot], [p.rotation.T for p in truth])
    except ValidationError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    out = Path(a["out"]) if a.get("out") else Path(a["est"]).parent
    summary = write_summary(out, errors, thresholds)
    _write_echo(out / "eval_config.json", "eval", {**a, "thresholds": thresholds, "out": str(out)})
    print(json.dumps(summary["recall"]))


# -- argument parsing ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentreg", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    grid = sub.add_parser("grid", help="rotation grid tools")
    gsub = grid.add_subparsers(dest="grid_command", required=True)
    gb = gsub.add_parser("build", help="build and cache a rotation grid")
    gb.add_argument("--L", type=int, required=True)
    gb.add_argument("--k", type=int, required=True)
    gb.add_argument("--out", required=True)
    gb.add_argument("--seed", type=int, default=None)
    gb.add_argument("--force", action="store_true")

    tr = sub.add_parser("train", help="train the autoencoder")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)

    gv = sub.add_parser("genviews", help="generate a synthetic view set")
    gv.add_argument("--shape", required=True, help=f"one of {', '.join(SHAPES)} or a cloud file")
    gv.add_argument("--n", type=int, required=True)
    gv.add_argument("--sigma", default="0,0,0", help="per-axis noise std a,b,c")
    gv.add_argument("--sigma-as-variance", dest="sigma_as_variance", action="store_true")
    gv.add_argument("--v", type=float, default=1.0)
    gv.add_argument("--o", type=float, default=0.0)
    gv.add_argument("--seed", type=int, default=0)
    gv.add_argument("--points", type=int, default=512)
    gv.add_argument("--variation", type=float, default=0.15)
    gv.add_argument("--rotation-mode", dest="rotation_mode", choices=("haar", "paper"), default="haar")
    gv.add_argument("--out", required=True)

    rg = sub.add_parser("register", help="register a view set")
    rg.add_argument("--views", required=True)
    rg.add_argument("--model", required=True)
    rg.add_argument("--grid", required=True)
    rg.add_argument("--config", required=True)
    rg.add_argument("--out", required=True)
    rg.add_argument("--sigma", default=None)
    rg.add_argument("--v", type=float, default=None)
    rg.add_argument("--o", type=float, default=None)

    ev = sub.add_parser("eval", help="score saved poses against the truth")
    ev.add_argument("--est", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--thresholds", default="10,15,30")
    ev.add_argument("--out", default=None)

    rr = sub.add_parser("rerun", help="repeat a command from its echoed configuration")
    rr.add_argument("echo")
    return p


COMMANDS = {"grid build": cmd_grid_build, "train": cmd_train, "genviews": cmd_genviews,
            "register": cmd_register, "eval": cmd_eval}


def _dispatch(command: str, args: dict) -> None:
    COMMANDS[command](args)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if ns.command == "rerun":
            echo = _read_json(ns.echo, "echo file", EXIT_CONFIG)
            _check_keys(echo, ("command", "args"), ("command", "args"), where="echo file")
            if echo["command"] not in COMMANDS:
                raise _config_error(f"unknown command {echo['command']!r} in echo file")
            args = dict(echo["args"])
            if ns.threads is not None and "threads" in args:
                args["threads"] = ns.threads
            _dispatch(echo["command"], args)
            return EXIT_OK
        args = {k: v for k, v in vars(ns).items() if k not in ("command", "grid_command", "verbose")}
        if ns.command == "grid":
            args.pop("threads")
            _dispatch("grid build", args)
        elif ns.command in ("train", "eval"):
            args.pop("threads")
            if ns.command == "train":
                args["config_data"] = None
            _dispatch(ns.command, args)
        elif ns.command == "genviews":
            args.pop("threads")
            _dispatch("genviews", args)
        else:
            args["config_data"] = None
            _dispatch("register", args)
        return EXIT_OK
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, RuntimeError, MemoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
