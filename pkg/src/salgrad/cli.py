"""Command-line interface: ``salgrad {edit,auto,inspect,eval}``.

Exit codes: 0 success, 1 usage or input error, 2 optimization aborted
(best-so-far outputs are still written).
"""

from __future__ import annotations

import argparse
import importlib
import logging
import platform
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from . import colorvision as cv
from . import diffcore as dc
from . import imageio
from . import operators as ops
from . import pipeline as pl
from . import sgop
from .objective import RunConfig, TargetMap, Trace, TraceRow, loss_sal, loss_sim, mask_mean, optimize

log = logging.getLogger("salgrad")

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# option name -> (type, default); None defaults are filled per command
EDIT_OPTIONS = {
    "image": (str, None),
    "mask": (str, None),
    "operator": (str, "recolor"),
    "target": (str, "zero"),
    "beta": (float, None),
    "gamma": (float, 0.1),
    "lr": (float, None),
    "iters": (int, 500),
    "seed": (int, 0),
    "out": (str, None),
    "soft_mask": (bool, False),
    "backend": (str, "builtin"),
}
AUTO_OPTIONS = {
    "image": (str, None),
    "frames": (str, None),
    "threshold": (float, pl.DEFAULT_THRESHOLD),
    "protect": (str, None),
    "candidates": (str, ",".join(pl.DEFAULT_CANDIDATES)),
    "beta": (float, None),
    "gamma": (float, 0.1),
    "lr": (float, None),
    "iters": (int, 500),
    "seed": (int, 0),
    "out": (str, None),
    "backend": (str, "builtin"),
}
INSPECT_OPTIONS = {"image": (str, None), "out": (str, None), "backend": (str, "builtin")}
EVAL_OPTIONS = {
    "original": (str, None),
    "edited": (str, None),
    "mask": (str, None),
    "backend": (str, "builtin"),
}
COMMANDS = {"edit": EDIT_OPTIONS, "auto": AUTO_OPTIONS, "inspect": INSPECT_OPTIONS, "eval": EVAL_OPTIONS}
REQUIRED = {
    "edit": ("image", "mask", "out"),
    "auto": ("image", "out"),
    "inspect": ("image", "out"),
    "eval": ("original", "edited", "mask"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salgrad", description="Saliency-guided image editing.")
    parser.add_argument("--version", action="version", version=f"salgrad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "edit": "optimize one operator on a masked region",
        "auto": "segment distractors and edit each with the best operator",
        "inspect": "write the predicted saliency map and a summary",
        "eval": "model-predicted saliency reduction between two images",
    }
    for name, options in COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key=value file; command-line flags take precedence")
        for key, (typ, _) in options.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, action="store_const", const=True, default=None)
            elif key == "operator":
                p.add_argument(flag, choices=["recolor", "warp", "convnet", "noise", "baseline"], default=None)
            else:
                p.add_argument(flag, type=typ, default=None)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Flags over config file over defaults."""
    options = COMMANDS[command]
    from_file = read_config_file(args.config) if args.config else {}
    unknown = set(from_file) - set(options)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    out = {}
    for key, (typ, default) in options.items():
        value = getattr(args, key)
        if value is None and key in from_file:
            raw = from_file[key]
            try:
                if typ is bool:
                    value = raw.lower() in ("1", "true", "yes")
                elif raw == "" or raw == "None":
                    value = None
                else:
                    value = typ(raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
        out[key] = default if value is None else value
    missing = [k for k in REQUIRED[command] if out.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return out


def load_backend(choice: str):
    if choice in ("builtin", "", None):
        return cv.BUILTIN
    if ":" not in choice:
        raise UsageError(f"backend must be 'builtin' or 'module:attribute', got {choice!r}")
    mod, attr = choice.split(":", 1)
    try:
        obj = getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as err:
        raise UsageError(f"cannot load backend {choice}: {err}") from None
    return obj


def _read(reader, path, what):
    try:
        return reader(path)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read {what} {path}: {err}") from None


def write_manifest(out: Path, command: str, options: dict) -> None:
    lines = [
        f"# salgrad {command} manifest; rerun with: salgrad {command} --config <this file>",
        f"# salgrad={__version__} numpy={np.__version__} python={platform.python_version()}",
    ]
    for key, value in options.items():
        lines.append(f"{key}={'' if value is None else value}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _target(choice: str, shape) -> TargetMap:
    if choice == "zero":
        return TargetMap.constant(0.0)
    if choice == "one":
        return TargetMap.constant(1.0)
    t = _read(imageio.read_gray, choice, "target map")
    if t.shape != tuple(shape):
        raise UsageError(f"target map is {t.shape}, image is {tuple(shape)}")
    return TargetMap.from_map(t)


def _run_config(o: dict, operator: str, target: TargetMap | None = None) -> RunConfig:
    try:
        return RunConfig(
            beta=o["beta"],
            gamma=o["gamma"],
            lr=o["lr"],
            iters=o["iters"],
            seed=o["seed"],
            operator=operator,
            target=target or TargetMap(),
        )
    except ValueError as err:
        raise UsageError(str(err)) from None


def cmd_edit(o: dict) -> int:
    backend = load_backend(o["backend"])
    image = _read(imageio.read_rgb, o["image"], "image")
    mask = _read(lambda p: imageio.read_mask(p, soft=o["soft_mask"]), o["mask"], "mask")
    if mask.shape != image.shape[:2]:
        raise UsageError(f"mask is {mask.shape}, image is {image.shape[:2]}")
    if not (mask > 0).any():
        raise UsageError("mask is empty")
    target = _target(o["target"], mask.shape)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "edit", o)

    aborted = None
    if o["operator"] == "baseline":
        beta = RunConfig(beta=o["beta"], operator="baseline").similarity_weight
        edited = ops.baseline_surround_recolor(image, mask)
        tag, params = "baseline", []
        ed = dc.const(edited)
        s_after = cv.saliency(ed, backend)
        ls = loss_sal(s_after, target.resolve(mask.shape), mask).item()
        lm = loss_sim(ed, image, mask).item()
        trace = Trace([TraceRow(0, ls, lm, 0.0, ls + beta * lm, mask_mean(s_after.data, mask))])
    else:
        config = _run_config(o, o["operator"], target)
        res = optimize(image, mask, o["operator"], config, backend)
        edited, tag, params, trace, aborted = res.image, o["operator"], res.params, res.trace, res.aborted

    imageio.write_png(out / "edited.png", edited)
    shown = imageio.read_rgb(out / "edited.png")
    imageio.write_gray(out / "saliency_before.png", cv.saliency(dc.const(image), backend).data)
    imageio.write_gray(out / "saliency_after.png", cv.saliency(dc.const(shown), backend).data)
    (out / "trace.csv").write_text(trace.to_csv())
    sgop.write_operator(out / "params.sgop", tag, params)
    if aborted:
        print(f"aborted: {aborted}", file=sys.stderr)
        return EXIT_ABORT
    first, best = trace[0].mask_mean_saliency, trace.best.mask_mean_saliency
    print(f"mask_mean_saliency {first:.4f} -> {best:.4f}")
    return EXIT_OK


def _region_png(shape, regions) -> np.ndarray:
    rng = np.random.default_rng(12345)
    vis = np.zeros(shape + (3,), dtype=np.uint8)
    for r in regions:
        color = rng.integers(64, 256, size=3).astype(np.uint8)
        vis[r.mask > 0] = color
    return vis


def _read_frames(directory: str, shape) -> tuple[list[Path], list[np.ndarray]]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"frames directory not found: {directory}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not paths:
        raise UsageError(f"no frames in {directory}")
    frames = [_read(imageio.read_rgb, p, "frame") for p in paths]
    for p, f in zip(paths, frames):
        if f.shape != shape:
            raise UsageError(f"frame {p.name} is {f.shape[:2]}, expected {shape[:2]}")
    return paths, frames


def cmd_auto(o: dict) -> int:
    backend = load_backend(o["backend"])
    image = _read(imageio.read_rgb, o["image"], "image")
    protect = None
    if o["protect"]:
        protect = _read(imageio.read_mask, o["protect"], "protect mask")
        if protect.shape != image.shape[:2]:
            raise UsageError(f"protect mask is {protect.shape}, image is {image.shape[:2]}")
    candidates = [c.strip() for c in o["candidates"].split(",") if c.strip()]
    bad = [c for c in candidates if c not in ops.OPERATORS]
    if not candidates or bad:
        raise UsageError(f"bad candidate list {o['candidates']!r}")
    if not 0.0 <= o["threshold"] <= 1.0:
        raise UsageError("threshold must lie in [0, 1]")
    frame_paths, frames = ([], None)
    if o["frames"]:
        frame_paths, frames = _read_frames(o["frames"], image.shape)
    config = _run_config(o, candidates[0])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "auto", o)

    sal = cv.saliency(dc.const(image), backend).data
    regions = pl.segment_distractors(sal, o["threshold"], protect)
    imageio.write_png(out / "regions.png", _region_png(image.shape[:2], regions))
    plans = []
    lines = ["region,top,left,height,width,candidate,initial_saliency,final_saliency,reduction_pct,selected"]
    try:
        for i, region in enumerate(regions):
            plan = pl.select_operator(image, region, candidates, config, backend)
            plans.append(plan)
            # measured on the unedited image; a convnet trace starts after pretraining
            s0 = float((sal * region.mask).sum() / region.mask.sum())
            for key, trace in plan.traces.items():
                tag = key.split(":", 1)[1]
                s1 = trace.best.mask_mean_saliency if len(trace) else float("nan")
                red = 100.0 * (s0 - s1) / s0 if s0 else 0.0
                top, left, h, w = region.bbox
                lines.append(
                    f"{i},{top},{left},{h},{w},{tag},{s0:.6f},{s1:.6f},{red:.3f},{int(tag == plan.operator)}"
                )
    except pl.SelectionError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return EXIT_ABORT
    finally:
        sgop.write_plans(out / "plans.sgop", [p.to_record() for p in plans])
        (out / "report.csv").write_text("\n".join(lines) + "\n")

    edited = pl.apply_to_frames([image], plans)[0]
    imageio.write_png(out / "edited.png", edited)
    summary = []
    for i, p in enumerate(plans):
        red = pl.saliency_reduction(image, edited, p.region.mask, backend)
        summary.append(f"region={i} operator={p.operator} reduction_pct={red:.3f}")
    (out / "reduction.txt").write_text("".join(s + "\n" for s in summary))
    if frames is not None:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for path, f in zip(frame_paths, pl.apply_to_frames(frames, plans)):
            imageio.write_png(fdir / (path.stem + ".png"), f)
    print(f"{len(regions)} region(s)")
    for s in summary:
        print(s)
    return EXIT_OK


def _peaks(s: np.ndarray, k: int = 5) -> list[tuple[int, int, float]]:
    local = (s == ndimage.maximum_filter(s, size=5, mode="nearest"))
    ys, xs = np.nonzero(local)
    order = np.lexsort((xs, ys, -s[ys, xs]))[:k]
    return [(int(ys[i]), int(xs[i]), float(s[ys[i], xs[i]])) for i in order]


def cmd_inspect(o: dict) -> int:
    backend = load_backend(o["backend"])
    image = _read(imageio.read_rgb, o["image"], "image")
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    s = cv.saliency(dc.const(image), backend).data
    imageio.write_gray(out / "saliency.png", s)
    lines = [f"min={s.min():.6f}", f"max={s.max():.6f}", f"mean={s.mean():.6f}"]
    for rank, (y, x, v) in enumerate(_peaks(s), 1):
        lines.append(f"peak{rank}={y},{x},{v:.6f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    backend = load_backend(o["backend"])
    original = _read(imageio.read_rgb, o["original"], "image")
    edited = _read(imageio.read_rgb, o["edited"], "image")
    mask = _read(imageio.read_mask, o["mask"], "mask")
    if original.shape != edited.shape or mask.shape != original.shape[:2]:
        raise UsageError(f"dimension mismatch: {original.shape}, {edited.shape}, mask {mask.shape}")
    try:
        red = pl.saliency_reduction(original, edited, mask, backend)
    except ZeroDivisionError as err:
        raise UsageError(str(err)) from None
    outside = (1.0 - mask)[..., None]
    mse = float(((outside * (edited - original)) ** 2).sum() / (outside.sum() * 3)) if outside.sum() else 0.0
    print(f"reduction_pct={red:.6f}")
    print(f"outside_mse={mse:.8f}")
    return EXIT_OK


HANDLERS = {"edit": cmd_edit, "auto": cmd_auto, "inspect": cmd_inspect, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        options = resolve_options(args.command, args)
        return HANDLERS[args.command](options)
    except UsageError as err:
        print(f"salgrad: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (dc.ShapeError, ValueError) as err:
        print(f"salgrad: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
