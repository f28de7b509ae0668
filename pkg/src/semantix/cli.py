"""Command-line interface.

Every config leaf is also a ``--<kebab-name>`` flag; flags override the file
given by ``--config``, which overrides the built-in defaults (or the video
preset). ``SEMANTIX_SEED`` overrides every seed. Failures exit with status 1
and print one JSON line ``{"error": ..., "message": ...}`` to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, kebab, option_table
from .correspondence import (
    FeatureMap,
    add_positional_encoding,
    cluster_masks,
    make_positional_field,
    match_features,
    pca_visualize,
    rearrange,
)
from .denoiser import Condition, Taps
from .imaging import read_frames, read_image, sha256_path, write_frames, write_image
from .inversion import (
    _noise_for,
    invert,
    load_record,
    reconstruct,
    save_record,
    schedule_from_params,
    schedule_params,
)
from .metrics import evaluate_pair
from .sampler import run_transfer
from .schedule import make_plan

RUN_MANIFEST = "manifest.json"
ENERGY_LOG = "energy_log.jsonl"

logger = logging.getLogger("semantix")


class CLIError(Exception):
    """Raised for bad invocations; reported like any other failure."""


class _Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        raise CLIError(message)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _json_list(text: str) -> list:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"expected a JSON list, got {text!r}") from exc
    return value


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML or JSON run config")
    p.add_argument("--preset", choices=("image", "video"), default=argparse.SUPPRESS,
                   help="base guidance weights before the config file is applied")
    for section, f in option_table():
        flag = "--" + kebab(f.name)
        dest = f"opt__{section}__{f.name}"
        default = f.default
        kw = dict(dest=dest, default=argparse.SUPPRESS, help=f"[{section}] default: {default!r}")
        if isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(default, int):
            p.add_argument(flag, type=int, **kw)
        elif isinstance(default, float):
            p.add_argument(flag, type=float, **kw)
        elif isinstance(default, str):
            p.add_argument(flag, type=str, **kw)
        elif f.name == "tap_table":
            p.add_argument(flag, type=_json_list, **kw)
        else:
            p.add_argument(flag, type=_int_list, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semantix", description="Energy-guided semantic style transfer.")
    parser.add_argument("--version", action="version", version=f"semantix {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("transfer", help="stylize a context image (or frame directory) with a reference image")
    p.add_argument("context", type=Path)
    p.add_argument("reference", type=Path)
    _add_config_flags(p)

    p = sub.add_parser("invert", help="invert an image and write an inversion archive")
    p.add_argument("input", type=Path)
    p.add_argument("archive", type=Path)
    _add_config_flags(p)

    p = sub.add_parser("reconstruct", help="replay an inversion archive to an image")
    p.add_argument("archive", type=Path)
    p.add_argument("--out", type=Path, default=None, help="output PNG (default: <output-dir>/reconstruction.png)")
    _add_config_flags(p)

    p = sub.add_parser("inspect-features", help="PCA images of tapped features and correspondence overlays")
    p.add_argument("input", type=Path)
    p.add_argument("--reference", type=Path, default=None)
    p.add_argument("--t", type=int, default=None, help="diffusion timestep (default: plan t-start)")
    _add_config_flags(p)

    p = sub.add_parser("metrics", help="Gram loss and SSIM between two images or two directories")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    _add_config_flags(p)
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    ns = vars(args)
    base = RunConfig.video() if ns.get("preset") == "video" else RunConfig()
    cfg = RunConfig.load(ns["config"], base) if "config" in ns else base
    data = _explicit_flags(args)
    if data:
        merged = cfg.to_dict()
        for section, vals in data.items():
            merged[section].update(vals)
        cfg = RunConfig.from_dict(merged)
    return cfg.with_env_seed(environ)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _input_entry(path: Path) -> dict:
    return {"name": path.name, "sha256": sha256_path(path)}


# -- subcommands -----------------------------------------------------------------


def cmd_transfer(args, cfg: RunConfig) -> dict:
    size = cfg.image_size()
    ctx = read_frames(args.context, size)
    if args.reference.is_dir():
        raise CLIError(f"reference must be a single PNG image: {args.reference}")
    ref = read_image(args.reference, size)
    if ref.shape != ctx.shape[1:]:
        raise CLIError(f"reference size {ref.shape[:2]} differs from context size {ctx.shape[1:3]}")
    backend = cfg.build_backend(ctx.shape[1:3])
    s = cfg.make_schedule()
    plan = make_plan(s, cfg.plan.t_start, cfg.plan.n_steps)
    ecfg = cfg.energy_config()
    seed = cfg.plan.inversion_seed
    prompts = (Condition(cfg.prompts.context_prompt), Condition(cfg.prompts.reference_prompt))
    on_step = None
    if args.verbose:
        def on_step(session):
            rec = session.energy_log[-1]
            logger.info("step %d/%d t=%d total=%.6g", rec["step"] + 1, len(plan), rec["t"], rec["total"])
    result = run_transfer(ctx, ref, prompts, backend, s, ecfg, plan, seed=seed, on_step=on_step)

    out_dir = Path(cfg.io.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for name, frames in (("output.png", result.output), ("context_recon.png", result.context_recon),
                         ("reference_recon.png", result.reference_recon)):
        written = write_frames(out_dir / name, frames)
        target = written[0] if len(written) == 1 else written[0].parent
        outputs[target.name] = sha256_path(target)
    log_name = None
    if cfg.io.energy_log:
        log_name = ENERGY_LOG
        with open(out_dir / ENERGY_LOG, "w") as fh:
            for rec in result.energy_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "format": "semantix-run",
        "command": "transfer",
        "config": cfg.to_dict(),
        "seeds": {
            "denoiser": cfg.denoiser.seed,
            "inversion_context": seed,
            "inversion_reference": seed + 1,
            "mask": cfg.guidance.mask_seed,
            "shuffle": cfg.guidance.shuffle_seed,
        },
        "shuffle_correspondence": {"enabled": cfg.guidance.shuffle_correspondence,
                                   "seed": cfg.guidance.shuffle_seed},
        "schedule": schedule_params(s),
        "plan": list(plan.steps),
        "energy_log": log_name,
        "final_energy": result.energy_log[-1] if result.energy_log else None,
        "inputs": {"context": _input_entry(args.context), "reference": _input_entry(args.reference)},
        "input_size": list(ctx.shape[1:3]),
        "frames": int(ctx.shape[0]),
        "outputs": outputs,
        "diagnostics": dict(sorted(result.diagnostics.items())),
    }
    _write_json(out_dir / RUN_MANIFEST, manifest)
    return {"output_dir": str(out_dir), "outputs": sorted(outputs)}


def cmd_invert(args, cfg: RunConfig) -> dict:
    img = read_image(args.input, cfg.image_size())
    backend = cfg.build_backend(img.shape[:2])
    s = cfg.make_schedule()
    plan = make_plan(s, cfg.plan.t_start, cfg.plan.n_steps)
    x0 = backend.encode(img[None])
    cond = Condition(cfg.prompts.context_prompt)
    omega = cfg.guidance.omega
    rec = invert(x0, backend, cond, s, plan, omega, cfg.plan.inversion_seed)
    err = float((reconstruct(rec, backend, s) - x0).abs().max())
    extra = {"config": cfg.to_dict(), "input": _input_entry(args.input), "recon_max_abs": err}
    save_record(rec, args.archive, extra)
    return {"archive": str(args.archive), "recon_max_abs": err}


def _archive_config(manifest: dict, cfg: RunConfig, explicit: dict) -> RunConfig:
    stored = manifest.get("extra", {}).get("config")
    if stored is None:
        return cfg
    merged = RunConfig.from_dict(stored).to_dict()
    for section, vals in explicit.items():
        merged[section].update(vals)
    return RunConfig.from_dict(merged)


def _explicit_flags(args) -> dict:
    data: dict = {}
    for key, value in vars(args).items():
        if key.startswith("opt__"):
            _, section, name = key.split("__", 2)
            data.setdefault(section, {})[kebab(name)] = value
    return data


def cmd_reconstruct(args, cfg: RunConfig) -> dict:
    rec, manifest = load_record(args.archive)
    cfg = _archive_config(manifest, cfg, _explicit_flags(args))
    s = schedule_from_params(rec.schedule, cfg.schedule.beta_spec)
    shape = rec.shape
    d = cfg.denoiser.downscale if cfg.denoiser.kind == "toy" else 1
    backend = cfg.build_backend((shape[2] * d, shape[3] * d))
    x0 = reconstruct(rec, backend, s)
    img = backend.decode(x0)
    out = args.out or Path(cfg.io.output_dir) / "reconstruction.png"
    write_image(out, img[0])
    summary = {
        "archive": manifest.get("extra", {}).get("input", {}),
        "output": out.name,
        "output_sha256": sha256_path(out),
        "recon_max_abs_at_invert": manifest.get("extra", {}).get("recon_max_abs"),
    }
    _write_json(out.with_suffix(".json"), summary)
    return {"output": str(out)}


def _overlay(ref_rgb: np.ndarray, assignment: np.ndarray, hw: tuple) -> np.ndarray:
    """Reference PCA colours pulled onto the context grid; invalid positions black."""
    flat = ref_rgb.reshape(-1, 3)
    out = np.zeros((assignment.size, 3))
    ok = assignment >= 0
    out[ok] = flat[assignment[ok]]
    return out.reshape(hw[0], hw[1], 3)


def cmd_inspect_features(args, cfg: RunConfig) -> dict:
    s = cfg.make_schedule()
    t = cfg.plan.t_start if args.t is None else args.t
    if not 1 <= t <= s.T:
        raise CLIError(f"invalid timestep t={t}: must lie in [1, {s.T}]")
    size = cfg.image_size()
    img = read_image(args.input, size)
    ref = read_image(args.reference, size) if args.reference is not None else None
    if ref is not None and ref.shape != img.shape:
        raise CLIError(f"reference size {ref.shape[:2]} differs from input size {img.shape[:2]}")
    backend = cfg.build_backend(img.shape[:2])
    blocks = tuple(sorted(backend.tap_table))
    seed = cfg.plan.inversion_seed
    ab = s.alpha_bar_at(t)

    def diffuse(x0, sd):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * _noise_for(sd, t, tuple(x0.shape))

    x = diffuse(backend.encode(img[None]), seed)
    cond = [Condition(cfg.prompts.context_prompt)]
    if ref is not None:
        x = torch.cat([x, diffuse(backend.encode(ref[None]), seed + 1)])
        cond.append(Condition(cfg.prompts.reference_prompt))
    with torch.no_grad():
        out = backend.predict(x, t, cond, Taps(features=blocks, self_attn=blocks))
    out_dir = Path(cfg.io.output_dir)
    written = []
    g = cfg.guidance
    for k in blocks:
        f = out.features[k]
        f_c = FeatureMap(f.data[:1], k, t)
        name = f"pca_block{k}.png"
        write_image(out_dir / name, pca_visualize(f_c))
        written.append(name)
        if ref is None:
            continue
        f_r = FeatureMap(f.data[1:2], k, t)
        attn = out.self_attn[k]
        region = cluster_masks(attn[:1], attn[1:2], f_c.spatial, g.k_clusters, g.mask_seed)
        pe = make_positional_field(f_c.channels, *f_c.spatial, weight=g.lambda_pe)
        corr = match_features(add_positional_encoding(f_c, pe), add_positional_encoding(f_r, pe), region)
        warped = rearrange(f_r, corr)
        name = f"correspondence_block{k}.png"
        overlay = _overlay(pca_visualize(f_r), corr.assignment[0].numpy(), f_c.spatial)
        write_image(out_dir / name, overlay)
        written.append(name)
        name = f"warped_block{k}.png"
        write_image(out_dir / name, pca_visualize(warped))
        written.append(name)
    return {"output_dir": str(out_dir), "t": t, "files": written}


def _pairs(a: Path, b: Path) -> list:
    if a.is_dir() != b.is_dir():
        raise CLIError("metrics needs two image files or two directories")
    if not a.is_dir():
        for p in (a, b):
            if not p.is_file():
                raise FileNotFoundError(f"input image not found: {p}")
        return [(a.stem, a, b)]
    names_a = {p.name for p in a.glob("*.png")}
    names_b = {p.name for p in b.glob("*.png")}
    if names_a != names_b:
        raise CLIError(f"directories hold different PNG names: {sorted(names_a ^ names_b)}")
    if not names_a:
        raise FileNotFoundError(f"no PNG files in {a}")
    return [(Path(n).stem, a / n, b / n) for n in sorted(names_a)]


def cmd_metrics(args, cfg: RunConfig) -> dict:
    out_dir = Path(cfg.io.output_dir)
    rows = []
    for stem, pa, pb in _pairs(args.a, args.b):
        report = evaluate_pair(read_image(pa), read_image(pb))
        d = report.as_dict()
        d["a"], d["b"] = pa.name, pb.name
        _write_json(out_dir / f"metrics_{stem}.json", d)
        rows.append({"name": stem, "gram_loss": report.gram_loss, "ssim": report.ssim,
                     "recon_max_abs": report.recon_max_abs})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["name", "gram_loss", "ssim", "recon_max_abs"])
        w.writeheader()
        w.writerows(rows)
    return {"pairs": len(rows), "output_dir": str(out_dir)}


COMMANDS = {
    "transfer": cmd_transfer,
    "invert": cmd_invert,
    "reconstruct": cmd_reconstruct,
    "inspect-features": cmd_inspect_features,
    "metrics": cmd_metrics,
}


def _fail(exc: BaseException) -> int:
    kind = type(exc).__name__
    msg = " ".join(str(exc).split()) or kind
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")
    return 1


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CLIError as exc:
        return _fail(exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](args, cfg)
    except (CLIError, ConfigError, ValueError, LookupError, TypeError, OSError, FloatingPointError) as exc:
        return _fail(exc)
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
