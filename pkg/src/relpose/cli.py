"""Command-line entry point: ``relpose <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.

Configuration files are flat ``key=value`` text (``#`` starts a comment).
Keys are the model fields (``variant``, ``f_dim``, ...), the training fields
(``base_lr``, ``total_iters``, ...), plus ``model`` (a preset tag such as
``RN-drop``, applied before the explicit model fields), ``data`` (training
CSV) and ``seed`` (shared by initialisation and training). Unknown keys are
an error. Command-line flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck as gc_mod
from .evaluation import PROTOCOLS, evaluate_all, file_digest
from .model import (PRESETS, ModelFileError, ModelSpec, load_model, mask_from_visibility, preset,
                    save_model)
from .skeleton import (GROUPS, N_JOINTS, SCENARIOS, DataFormatError, SynthConfig, dataset_digest,
                       load_dataset, postprocess, save_dataset, synth_generate)
from .training import TrainConfig, finetune, train, write_loss_curve

log = logging.getLogger("relpose")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2

SPEC_KEYS = {f.name: f.type for f in fields(ModelSpec) if f.name != "seed"}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}
EXTRA_KEYS = {"model": "str", "data": "str", "seed": "int"}
CONFIG_KEYS = {**EXTRA_KEYS, **SPEC_KEYS, **TRAIN_KEYS}

DEFAULT_CONFIG = {"model": "RN", "data": "", "seed": "0"}


class UsageError(Exception):
    """Bad flags, bad config or unreadable input; maps to exit code 2."""


# --------------------------------------------------------------------------
# config


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise UsageError(f"{source}: line {lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}: line {lineno}: unknown key {key!r}")
        values[key] = value
    return values


def _convert(kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise UsageError(f"cannot read {raw!r} as {kind}") from None
    return raw


def build_settings(config_path, overrides: dict[str, str]):
    """Merge defaults, config file and flag overrides into (spec, train config, values)."""
    values = dict(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config(path.read_text(encoding="utf-8"), str(path)))
    for key, value in overrides.items():
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown key {key!r}")
        values[key] = value
    seed = _convert("int", values["seed"])
    spec_kw = {k: _convert(SPEC_KEYS[k], v) for k, v in values.items() if k in SPEC_KEYS}
    train_kw = {k: _convert(TRAIN_KEYS[k], v) for k, v in values.items() if k in TRAIN_KEYS}
    try:
        spec = preset(values["model"], seed=seed, **spec_kw)
        config = TrainConfig(seed=seed, **train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return spec, config, values


def effective_config_text(spec: ModelSpec, config: TrainConfig, values: dict) -> str:
    lines = ["# effective configuration", f"model={values['model']}", f"data={values.get('data', '')}",
             f"seed={spec.seed}"]
    lines += [f"{k}={getattr(spec, k)}" for k in SPEC_KEYS]
    lines += [f"{k}={getattr(config, k)}" for k in TRAIN_KEYS]
    return "\n".join(lines) + "\n"


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    for flag, key in (("arch", "model"), ("data", "data"), ("seed", "seed"),
                      ("total_iters", "total_iters"), ("batch_size", "batch_size"),
                      ("lr", "base_lr")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _load_data(path):
    if not path:
        raise UsageError("no training data given (--data or data= in the config)")
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    return load_dataset(path)


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _write_outputs(result, out_model: Path, spec, config, values) -> None:
    out_model.parent.mkdir(parents=True, exist_ok=True)
    save_model(result.model, out_model)
    write_loss_curve(result.curve, out_model.with_suffix(".loss.csv"))
    out_model.with_suffix(".config.txt").write_text(
        effective_config_text(spec, config, values), encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    ds = synth_generate(args.n, args.seed, cfg=SynthConfig(noise2d=args.noise))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out} (sha256 {dataset_digest(ds)[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    spec, config, values = build_settings(args.config, _overrides(args))
    ds = _load_data(values.get("data"))
    result = train(spec, ds, config)
    _write_outputs(result, Path(args.out_model), spec, config, values)
    last = result.curve[-1][2] if result.curve else float("nan")
    print(f"trained {spec.tag} for {config.total_iters} iterations; last logged loss {last:.4g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    base = _load_model(args.model)
    overrides = _overrides(args)
    overrides.setdefault("finetune", "true")
    _, config, values = build_settings(args.config, overrides)
    if not config.finetune:
        raise UsageError("finetune=false in the config; nothing to do")
    ds = _load_data(values.get("data"))
    result = finetune(base, ds, config)
    values["model"] = base.spec.tag
    _write_outputs(result, Path(args.out_model), base.spec, config, values)
    print(f"finetuned {base.spec.tag} for {config.total_iters} iterations")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    if not Path(args.data).is_file():
        raise UsageError(f"data file not found: {args.data}")
    ds = load_dataset(args.data)
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    report = evaluate_all(model, ds, scenarios, protocols, seed=args.seed,
                          dataset_id=dataset_digest(ds)[:16],
                          model_hash=file_digest(args.model)[:16])
    out = Path(args.out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def read_2d_csv(path) -> tuple[list[str], np.ndarray]:
    expected = ["sample_id"] + [f"j{j:02d}_{c}" for j in range(N_JOINTS) for c in "uv"]
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        if header[:len(expected)] != expected:
            raise DataFormatError(f"{path}: line 1: header must start with {','.join(expected[:3])},...")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < len(expected):
                raise DataFormatError(f"{path}: line {lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:len(expected)]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            ids.append(row[0])
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    return ids, np.array(rows)


def parse_mask(text: str | None) -> np.ndarray:
    if text is None:
        return np.ones(N_JOINTS, dtype=bool)
    if len(text) != N_JOINTS or set(text) - {"0", "1"}:
        raise UsageError(f"--mask must be {N_JOINTS} characters of 0/1 (1 = visible)")
    return np.array([c == "1" for c in text])


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    if model.stats is None:
        raise UsageError("model file carries no normalisation statistics")
    vis = parse_mask(args.mask)
    if not Path(args.in_2d_csv).is_file():
        raise UsageError(f"input file not found: {args.in_2d_csv}")
    ids, flat = read_2d_csv(args.in_2d_csv)
    inputs = np.where(np.repeat(vis, 2), flat - model.stats.mean2d, 0.0)
    masks = None
    if model.spec.uses_relational_dropout:
        masks = [mask_from_visibility(vis, model.spec)] * len(ids)
    poses = postprocess(model.predict(inputs, masks), model.stats)
    header = ["sample_id"] + [f"j{j:02d}_{c}" for j in range(N_JOINTS) for c in "xyz"]
    with open(args.out_3d_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for sid, pose in zip(ids, poses):
            w.writerow([sid] + [repr(float(v)) for v in pose.ravel()])
    print(f"wrote {len(ids)} root-relative poses to {args.out_3d_csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = ("FC", "FC-drop", "RN", "RN-hier") if args.variant == "all" else (args.variant,)
    ok = True
    for tag in variants:
        report = gc_mod.check_variant(tag, seed=args.seed)
        status = "PASS" if report.passed() else "FAIL"
        ok &= report.passed()
        print(f"{tag:<8} {status}  max relative error {report.max_rel_error:.3e}")
        for c in report.worst(args.worst):
            print(f"    {c.name:<28} {c.max_rel_error:.3e}  ({c.size} entries)")
    return EXIT_OK if ok else EXIT_VERIFY


BONE_COLORS = {"torso": "#2ca02c", "right": "#d62728", "left": "#1f77b4"}


def _bone_color(child: int) -> str:
    for k, group in enumerate(GROUPS):
        if child in group:
            return BONE_COLORS[("left", "right", "left", "right", "torso")[k]]
    raise ValueError(child)


def render_svg(pose, size: int = 300, margin: float = 20.0) -> str:
    """Front (x-y) and side (z-y) orthographic views of one (16, 3) pose."""
    from .skeleton import PARENTS
    pose = np.asarray(pose, dtype=np.float64).reshape(N_JOINTS, 3)
    centred = pose - pose.mean(axis=0)
    extent = max(float(np.abs(centred).max()), 1e-9)
    scale = (size / 2 - margin) / extent
    views = (("front", 0), ("side", 2))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * size}" height="{size}" '
             f'viewBox="0 0 {2 * size} {size}">',
             f'<rect width="{2 * size}" height="{size}" fill="white"/>']
    for v, (label, axis) in enumerate(views):
        ox = v * size + size / 2
        oy = size / 2
        parts.append(f'<g id="{label}">')
        parts.append(f'<text x="{v * size + 8}" y="16" font-size="12" font-family="sans-serif">{label}</text>')
        for j, p in enumerate(PARENTS):
            if p < 0:
                continue
            x1, y1 = ox + scale * centred[p, axis], oy + scale * centred[p, 1]
            x2, y2 = ox + scale * centred[j, axis], oy + scale * centred[j, 1]
            parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                         f'stroke="{_bone_color(j)}" stroke-width="3" stroke-linecap="round"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_3d_csv(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["sample_id", "j00_x"]:
            raise DataFormatError(f"{path}: line 1: expected a 3D pose CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1 + 3 * N_JOINTS:
                raise DataFormatError(f"{path}: line {lineno}: expected {1 + 3 * N_JOINTS} fields")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from None
            ids.append(row[0])
    if not rows:
        raise DataFormatError(f"{path}: no poses")
    return ids, np.array(rows).reshape(-1, N_JOINTS, 3)


def cmd_render(args) -> int:
    if not Path(args.in_3d_csv).is_file():
        raise UsageError(f"input file not found: {args.in_3d_csv}")
    ids, poses = read_3d_csv(args.in_3d_csv)
    if not 0 <= args.row < len(ids):
        raise UsageError(f"--row {args.row} out of range (file has {len(ids)} poses)")
    Path(args.out_svg).write_text(render_svg(poses[args.row]), encoding="utf-8")
    print(f"rendered {ids[args.row]} to {args.out_svg}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p, with_arch: bool) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--data", help="training dataset CSV (overrides data=)")
    p.add_argument("--out-model", required=True, help="output model file")
    if with_arch:
        p.add_argument("--arch", choices=tuple(PRESETS), help="model preset (overrides model=)")
    p.add_argument("--seed", type=int)
    p.add_argument("--total-iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key; may repeat")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="2D pixel noise std")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p, with_arch=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="finetune with frozen batch-norm statistics")
    p.add_argument("--model", required=True, help="model file to start from")
    _add_train_flags(p, with_arch=False)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate under missing-joint scenarios")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scenario", choices=("all",) + SCENARIOS, default="all")
    p.add_argument("--protocol", choices=("all",) + PROTOCOLS, default="all")
    p.add_argument("--seed", type=int, default=0, help="seed of the rand2 scenario")
    p.add_argument("--out-report", required=True, help="report CSV; a .txt table is written beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="lift 2D joints to root-relative 3D")
    p.add_argument("--model", required=True)
    p.add_argument("--in-2d-csv", required=True)
    p.add_argument("--mask", help="16 characters of 0/1, 1 = visible (default all visible)")
    p.add_argument("--out-3d-csv", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="compare analytic and numeric gradients")
    p.add_argument("--variant", choices=("all", "FC", "FC-drop", "RN", "RN-hier"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--worst", type=int, default=3, help="offenders listed per variant")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("render", help="draw one 3D pose as SVG (front and side views)")
    p.add_argument("--in-3d-csv", required=True)
    p.add_argument("--out-svg", required=True)
    p.add_argument("--row", type=int, default=0)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataFormatError, ModelFileError, ValueError) as exc:
        print(f"relpose {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
