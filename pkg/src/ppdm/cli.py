"""Command-line entry point: ``ppdm {gen,encode,loss,decode,eval,selftest}``.

Exit codes: 0 ok, 1 usage, 2 I/O or format error, 3 failed checks.
Errors are reported as a single JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as pio
from .core import CollisionError, GridConfig, PPDMError
from .decoder import DecodeConfig, decode
from .evaluator import EvalConfig, evaluate, format_report, report_to_dict
from .fixtures import SceneSpec, generate, to_annotations
from .losses import DEFAULT_LAMBDA, total_loss
from .targets import MAP_NAMES, EncodedTargets, MapSet, encode, targets_from_maps

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


def _threads() -> int:
    raw = os.environ.get("PPDM_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(EXIT_USAGE, "usage", f"PPDM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CLIError(EXIT_USAGE, "usage", "PPDM_THREADS must be >= 1")
    return n


def _pmap(fn, items):
    """Ordered parallel map; results do not depend on the thread count."""
    items = list(items)
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _existing_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CLIError(EXIT_IO, "io", f"not a directory: {path}")
    return p


def _map_path(root: Path, img_id: int, name: str) -> Path:
    return root / f"{img_id}.{name}.ppt"


def _read_mapset(root: Path, img_id: int) -> MapSet:
    arrays = {}
    for name in MAP_NAMES:
        path = _map_path(root, img_id, name)
        if not path.is_file():
            raise CLIError(EXIT_IO, "io", f"missing tensor file {path}")
        arr = pio.read_tensor(path)
        if arr.ndim != 3:
            raise pio.FormatError(str(path), f"expected a 3-d tensor, got rank {arr.ndim}")
        arrays[name] = arr.astype(np.float64)
    return MapSet(**arrays)


def _image_ids(root: Path) -> list[int]:
    ids = set()
    for p in root.glob("*.heat_h.ppt"):
        try:
            ids.add(int(p.name.split(".", 1)[0]))
        except ValueError:
            continue
    return sorted(ids)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    grid = GridConfig(args.width, args.height, args.stride, args.objects, args.verbs)
    spec = SceneSpec(seed=args.seed, num_images=args.images, max_triplets_per_image=args.max_triplets, grid=grid)
    pio.write_annotations(args.out, to_annotations(generate(spec), grid))
    return EXIT_OK


def cmd_encode(args) -> int:
    ann = pio.read_annotations(args.ann)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(item):
        img_id, triplets = item
        try:
            maps = encode(triplets, ann.grid).maps
        except CollisionError as e:
            raise CLIError(EXIT_IO, "collision", f"image {img_id}: {e}") from None
        for name, arr in maps.items():
            pio.write_tensor(_map_path(out, img_id, name), arr)

    _pmap(work, ann.images.items())
    return EXIT_OK


def _window(targets: EncodedTargets, preds: MapSet, size: int = 8):
    """Crop predictions and targets to a window around the first interaction, keeping the global counts."""
    ys, xs = np.nonzero(targets.mask_a)
    cy, cx = (int(ys[0]), int(xs[0])) if ys.size else (0, 0)
    h, w = targets.mask_a.shape
    y0 = min(max(cy - size // 2, 0), max(h - size, 0))
    x0 = min(max(cx - size // 2, 0), max(w - size, 0))
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))

    def crop(ms: MapSet) -> MapSet:
        return MapSet(**{n: a[(slice(None),) + sl].copy() for n, a in ms.items()})

    return crop(preds), EncodedTargets(crop(targets.maps), targets.mask_h[sl], targets.mask_o[sl],
                                       targets.mask_a[sl], targets.num_h, targets.num_o, targets.num_a)


def grad_check(preds: MapSet, targets: EncodedTargets, lam: float) -> float:
    """Max relative error of the total-loss gradient on a cropped window, skipping non-smooth points."""
    from .acceptance import PROB_STEP, REG_STEP
    from .fixtures import finite_diff

    preds, targets = _window(targets, preds)
    _, grads = total_loss(preds, targets, lam)
    base = dict(preds.items())
    worst = 0.0
    for name in MAP_NAMES:
        heat = name.startswith("heat")
        step = PROB_STEP if heat else REG_STEP
        x = base[name]
        if heat:
            smooth = (x > 2 * step) & (x < 1 - 2 * step)
        else:
            smooth = np.abs(x - getattr(targets.maps, name)) > 2 * step
        numeric = finite_diff(lambda m: total_loss(MapSet(**m), targets, lam)[0].total, base, step, names=[name])[name]
        a, n = getattr(grads, name)[smooth], numeric[smooth]
        scale = np.maximum(np.abs(a), np.abs(n))
        nz = scale > 0
        if nz.any():
            worst = max(worst, float(np.max(np.abs(a - n)[nz] / scale[nz])))
    return worst


def cmd_loss(args) -> int:
    pred_dir, target_dir = _existing_dir(args.pred_dir), _existing_dir(args.target_dir)
    ids = _image_ids(target_dir)
    if not ids:
        raise CLIError(EXIT_IO, "io", f"no target maps in {target_dir}")

    def work(img_id):
        targets = targets_from_maps(_read_mapset(target_dir, img_id))
        preds = _read_mapset(pred_dir, img_id)
        if any(p.shape != t.shape for (_, p), (_, t) in zip(preds.items(), targets.maps.items())):
            raise pio.FormatError(str(pred_dir), f"image {img_id}: prediction shapes differ from targets")
        bd, _ = total_loss(preds, targets, args.lam)
        err = grad_check(preds, targets, args.lam) if args.grad_check else None
        return img_id, bd, err

    results = _pmap(work, ids)
    rows = [{"id": i, **bd.to_dict()} for i, bd, _ in results]
    keys = [k for k in rows[0] if k not in ("id", "lambda")]
    doc = {
        "lambda": args.lam,
        "images": rows,
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in keys},
    }
    failed = False
    if args.grad_check:
        from .acceptance import GRAD_REL_TOL

        worst = max(err for _, _, err in results)
        failed = worst > GRAD_REL_TOL
        doc["grad_check"] = {"max_rel_err": worst, "tolerance": GRAD_REL_TOL, "passed": not failed}
    print(json.dumps(doc, indent=2))
    return EXIT_CHECK if failed else EXIT_OK


def cmd_decode(args) -> int:
    ann = pio.read_annotations(args.ann)
    maps_dir = _existing_dir(args.maps_dir)
    dcfg = DecodeConfig(k_sel=args.topk, score_floor=args.score_floor)

    def work(img_id):
        maps = _read_mapset(maps_dir, img_id)
        try:
            maps.check(ann.grid)
        except ValueError as e:
            raise pio.FormatError(str(maps_dir), f"image {img_id}: {e}") from None
        return decode(maps, ann.grid, dcfg)

    ids = list(ann.images)
    pio.write_predictions(args.out, dict(zip(ids, _pmap(work, ids))))
    return EXIT_OK


def cmd_eval(args) -> int:
    ann = pio.read_annotations(args.ann)
    preds = pio.read_predictions(args.preds, ann.grid)
    cfg = EvalConfig(iou_thresh=args.iou, ap_mode=args.ap_mode, setting=args.setting)
    try:
        report = evaluate(ann, preds, cfg)
    except KeyError as e:
        raise CLIError(EXIT_IO, "format", str(e.args[0])) from None
    print(format_report(report))
    if args.report:
        from .plotting import render_report_figures

        Path(args.report).write_text(json.dumps(report_to_dict(report), indent=2) + "\n")
        render_report_figures(report, args.report)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .acceptance import run_all

    results = run_all(args.seed)
    failures = sum(not r.passed for r in results)
    print(f"{len(results) - failures}/{len(results)} criteria passed")
    return EXIT_CHECK if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppdm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a seeded synthetic annotation file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=_nonneg, default=10)
    p.add_argument("--max-triplets", type=_nonneg, default=8)
    p.add_argument("--width", type=_positive, default=512)
    p.add_argument("--height", type=_positive, default=512)
    p.add_argument("--stride", type=_positive, default=4)
    p.add_argument("--objects", type=_positive, default=80)
    p.add_argument("--verbs", type=_positive, default=117)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="write ground-truth target maps per image")
    p.add_argument("--ann", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("loss", help="evaluate training losses of predicted maps against targets")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--grad-check", action="store_true")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("decode", help="decode predicted maps into scored triplets")
    p.add_argument("--maps-dir", required=True)
    p.add_argument("--ann", required=True, help="annotation file supplying grid metadata and image ids")
    p.add_argument("--topk", type=_positive, default=100)
    p.add_argument("--score-floor", type=_unit_interval, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="compute HOI mAP")
    p.add_argument("--ann", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--ap-mode", choices=["per_hoi", "per_verb"], default="per_hoi")
    p.add_argument("--setting", choices=["default", "known_object"], default="default")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run every acceptance check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def _validate(args) -> None:
    if args.command == "eval" and not 0 < args.iou < 1:
        raise CLIError(EXIT_USAGE, "usage", f"--iou must lie in (0, 1), got {args.iou}")
    if args.command == "gen":
        try:
            GridConfig(args.width, args.height, args.stride, args.objects, args.verbs)
            SceneSpec(seed=args.seed, num_images=args.images, max_triplets_per_image=args.max_triplets,
                      grid=GridConfig(args.width, args.height, args.stride, args.objects, args.verbs))
        except ValueError as e:
            raise CLIError(EXIT_USAGE, "usage", str(e)) from None


def _fail(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
        return args.func(args)
    except CLIError as e:
        _fail(e.kind, str(e))
        return e.code
    except pio.FormatError as e:
        _fail("format", str(e))
        return EXIT_IO
    except OSError as e:
        _fail("io", f"{e.filename or ''}: {e.strerror or e}")
        return EXIT_IO
    except (PPDMError, ValueError) as e:
        _fail("data", str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
