"""Command-line entry point.

Subcommands: train, predict, eval, gradcheck, audit, synth, saliency.
Configuration lives in flat key=value text files; individual entries can
be overridden on the command line with repeatable --set key=value flags,
and --seed overrides any configured seed. Every run echoes its fully
resolved configuration before doing work, so an invocation can be
reproduced from its own output.

Exit status: 0 on success, 1 on failed checks (gradcheck), 2 on bad
usage, unreadable inputs, or invalid configuration, 3 when training halts
on a non-finite loss or gradient.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import OP_CHECK_NAMES, run_op_checks
from .metrics import compute_metrics
from .saliency import occlusion_saliency
from .train import TrainConfig, evaluate, fit, predict

OUT_DIR_ENV = "STEREOREG_OUT"


class CliError(Exception):
    """User-facing failure: message printed, no traceback, exit 2."""


# -- key=value config files ----------------------------------------------------


def read_kv_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not key:
                raise CliError(f"{path}:{ln}: empty key")
            if key in out:
                raise CliError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = value
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _apply_schema(raw: Dict[str, str], schema: Dict[str, Callable[[str], object]],
                  source: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, value in raw.items():
        if key not in schema:
            raise CliError(f"{source}: unknown key {key!r}; known: {sorted(schema)}")
        try:
            out[key] = schema[key](value)
        except ValueError as e:
            raise CliError(f"{source}: bad value for {key!r}: {e}") from None
    return out


_MODEL_SCHEMA: Dict[str, Callable[[str], object]] = {
    "f": int, "dmax": int, "height": int, "width": int, "in_channels": int,
    "variant": str, "loss_kind": str,
}
_TRAIN_SCHEMA: Dict[str, Callable[[str], object]] = {
    "iters": int, "crop_height": int, "crop_width": int, "batch_size": int,
    "seed": int, "lr": float, "decay": float, "eps": float,
    "val_cadence": int, "checkpoint_every": int,
    "stop_mae": float, "stop_bad1": float,
}
_SYNTH_SCHEMA: Dict[str, Callable[[str], object]] = {
    "height": int, "width": int, "channels": int, "seed": int, "dmax": int,
    "texture": str, "field": str, "d_range": _parse_floats,
    "fg_span": _parse_floats, "occlusion_exclude": _parse_bool,
}


def _merged_kv(path: str, overrides: Sequence[str], source: str) -> Dict[str, str]:
    raw = read_kv_file(path) if path else {}
    for item in overrides or ():
        if "=" not in item:
            raise CliError(f"--set needs key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def _echo_config(values: Dict[str, object]) -> None:
    print("# resolved configuration")
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(f"{x:g}" for x in v)
        print(f"{key}={v}")


def _build_model_config(kv: Dict[str, object]) -> M.ModelConfig:
    fields = {f.name for f in dataclasses.fields(M.ModelConfig)}
    picked = {k: v for k, v in kv.items() if k in fields}
    try:
        return M.ModelConfig(**picked).validate()
    except ValueError as e:
        raise CliError(f"invalid model config: {e}") from None


def _default_out(explicit: Optional[str]) -> str:
    if explicit:
        return explicit
    env = os.environ.get(OUT_DIR_ENV, "")
    if env:
        return env
    raise CliError(f"--out not given and {OUT_DIR_ENV} is unset")


def _load_dataset(manifest: str) -> List[D.StereoSample]:
    try:
        entries = D.read_manifest(manifest)
        return [D.load_sample(e) for e in entries]
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load dataset {manifest}: {e}") from None


def _read_pfm_2d(path: str, what: str) -> np.ndarray:
    try:
        arr, _ = D.read_pfm(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read {what} {path}: {e}") from None
    if arr.ndim != 2:
        raise CliError(f"{what} {path} must be single-channel")
    return arr


def _load_params(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load checkpoint {path}: {e}") from None


def _read_image(path: str, what: str) -> np.ndarray:
    try:
        return D.read_image(path)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read {what} {path}: {e}") from None


# -- subcommands ---------------------------------------------------------------


def _cmd_train(args) -> int:
    kv = _apply_schema(_merged_kv(args.config, args.set, args.config),
                       {**_MODEL_SCHEMA, **_TRAIN_SCHEMA}, args.config)
    if args.seed is not None:
        kv["seed"] = args.seed
    out_dir = _default_out(args.out)
    config = _build_model_config(kv)
    tfields = {f.name for f in dataclasses.fields(TrainConfig)}
    try:
        tc = TrainConfig(**{k: v for k, v in kv.items() if k in tfields}).validate()
    except ValueError as e:
        raise CliError(f"invalid training config: {e}") from None
    echo = dict(kv)
    echo.update({"out": out_dir, "data": args.data, "val": args.val or ""})
    _echo_config(echo)

    dataset = _load_dataset(args.data)
    val_set = _load_dataset(args.val) if args.val else None
    params = M.init_params(config, seed=tc.seed)
    result = fit(params, dataset, tc, out_dir=out_dir, val_set=val_set)
    for entry in result.log[-1:]:
        print(entry.format())
    if result.halted:
        print("halted on non-finite loss; last checkpoint retained", file=sys.stderr)
        return 3
    print(f"finished {len(result.log)} steps; final checkpoint {result.final_path}")
    return 0


def _cmd_predict(args) -> int:
    params = _load_params(args.checkpoint)
    left = _read_image(args.left, "left image")
    right = _read_image(args.right, "right image")
    _echo_config({"checkpoint": args.checkpoint, "left": args.left,
                  "right": args.right, "out": args.out,
                  **{k: getattr(params.config, k)
                     for k in ("f", "dmax", "variant", "loss_kind", "in_channels")}})
    try:
        disp = predict(params, left, right)
    except ValueError as e:
        raise CliError(f"inference failed: {e}") from None
    D.write_pfm(args.out, disp.astype(np.float32))
    raster = args.raster or args.out + ".ppm"
    D.write_image(raster, D.colormap_rgb(disp / max(params.config.dmax - 1, 1)))
    print(f"wrote {args.out} and {raster}")
    return 0


def _cmd_eval(args) -> int:
    pred = _read_pfm_2d(args.pred, "prediction")
    gt = _read_pfm_2d(args.gt, "ground truth")
    _echo_config({"pred": args.pred, "gt": args.gt, "d1": args.d1,
                  "policy": args.policy})
    report = D.sparse_mask_from_gt(gt, args.policy)
    if not report.usable:
        raise CliError("ground truth has no labeled pixels")
    try:
        m = compute_metrics(pred, np.where(report.mask, gt, 0.0), report.mask,
                            d1=args.d1)
    except ValueError as e:
        raise CliError(str(e)) from None
    print(m.format_table())
    print(m.format_pairs())
    return 0


def _cmd_gradcheck(args) -> int:
    names = args.op if args.op else None
    _echo_config({"ops": ",".join(names) if names else "all", "seed": args.seed,
                  "tol": args.tol})
    try:
        results = run_op_checks(names, seed=args.seed, tol=args.tol)
    except ValueError as e:
        raise CliError(str(e)) from None
    width = max(len(name) for name, _ in results)
    ok = True
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:<{width}}  max_rel={report.max_rel_error:.3e}  "
              f"tol={report.tol:.0e}  {status}")
        ok = ok and report.passed
    print(f"{'all ok' if ok else 'FAILURES'} ({len(results)} ops)")
    return 0 if ok else 1


def _cmd_audit(args) -> int:
    # accepts the shared train config; training keys are validated then ignored
    kv = _apply_schema(_merged_kv(args.config, args.set, args.config or "--set"),
                       {**_MODEL_SCHEMA, **_TRAIN_SCHEMA}, args.config or "--set")
    config = _build_model_config(kv)
    _echo_config({k: getattr(config, k) for k in
                  ("f", "dmax", "height", "width", "in_channels", "variant",
                   "loss_kind")})
    rows = M.audit_rows(config)
    label_w = max(len(r.label) for r in rows)
    desc_w = max(len(r.description) for r in rows)
    dims_w = max(len(r.dims) for r in rows)
    print(f"{'layer':<{label_w}}  {'description':<{desc_w}}  "
          f"{'output dims':<{dims_w}}  params")
    for r in rows:
        p = str(r.params) if r.params else ""
        print(f"{r.label:<{label_w}}  {r.description:<{desc_w}}  "
              f"{r.dims:<{dims_w}}  {p}")
    print(f"total parameters: {M.parameter_count(config)}")
    return 0


def _cmd_synth(args) -> int:
    kv = _apply_schema(_merged_kv(args.spec, args.set, args.spec), _SYNTH_SCHEMA,
                       args.spec)
    if args.seed is not None:
        kv["seed"] = args.seed
    out_dir = _default_out(args.out)
    if args.count < 1:
        raise CliError(f"--count must be positive, got {args.count}")
    fields = {f.name for f in dataclasses.fields(D.SynthSpec)}
    try:
        spec = D.SynthSpec(**{k: v for k, v in kv.items() if k in fields}).validate()
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid synth spec: {e}") from None
    _echo_config({**kv, "count": args.count, "out": out_dir})

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(args.count):
        sample = D.gen_synthetic_pair(dataclasses.replace(spec, seed=spec.seed + i))
        entry = D.save_sample_files(out_dir, f"pair{i:04d}", sample)
        entries.append(D.ManifestEntry(
            *(os.path.relpath(p, out_dir) for p in
              (entry.left, entry.right, entry.gt))))
    manifest = os.path.join(out_dir, "manifest.tsv")
    D.write_manifest(manifest, entries)
    print(f"wrote {args.count} pairs and {manifest}")
    return 0


def _cmd_saliency(args) -> int:
    params = _load_params(args.checkpoint)
    left = _read_image(args.left, "left image")
    right = _read_image(args.right, "right image")
    _echo_config({"checkpoint": args.checkpoint, "left": args.left,
                  "right": args.right, "x": args.x, "y": args.y,
                  "patch": args.patch, "stride": args.stride, "out": args.out})
    try:
        result = occlusion_saliency(params, left, right, (args.y, args.x),
                                    patch=args.patch, stride=args.stride)
    except ValueError as e:
        raise CliError(str(e)) from None
    D.write_pfm(args.out, result.heat.astype(np.float32))
    raster = args.raster or args.out + ".ppm"
    D.write_image(raster, D.colormap_rgb(result.heat))
    print(f"point ({args.x},{args.y}) disparity {result.point_disparity:.3f} "
          f"(patch shift {result.shift})")
    print(f"wrote {args.out} and {raster}")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereoreg",
                                description="end-to-end stereo disparity regression")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="optimize a model on a manifest dataset")
    t.add_argument("--config", required=True, help="key=value model+training config")
    t.add_argument("--data", required=True, help="training manifest (tsv)")
    t.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV})")
    t.add_argument("--val", help="validation manifest (tsv)")
    t.add_argument("--seed", type=int, help="override configured seed")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry")
    t.set_defaults(func=_cmd_train)

    q = sub.add_parser("predict", help="disparity map for one pair")
    q.add_argument("--left", required=True)
    q.add_argument("--right", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True, help="output PFM path")
    q.add_argument("--raster", help="color preview path (default OUT.ppm)")
    q.set_defaults(func=_cmd_predict)

    e = sub.add_parser("eval", help="score a prediction against ground truth")
    e.add_argument("--pred", required=True, help="prediction PFM")
    e.add_argument("--gt", required=True, help="ground-truth PFM")
    e.add_argument("--d1", action="store_true", help="also report D1 rate")
    e.add_argument("--policy", choices=list(D.MASK_POLICIES), default="nonfinite",
                   help="how gt marks unlabeled pixels")
    e.set_defaults(func=_cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--op", action="append", choices=OP_CHECK_NAMES,
                   help="check only this op (repeatable)")
    g.add_argument("--all", action="store_true",
                   help="check every op (default when no --op)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("audit", help="print the layer table with dims and params")
    a.add_argument("--config", help="key=value model config")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(func=_cmd_audit)

    s = sub.add_parser("synth", help="generate synthetic pairs with ground truth")
    s.add_argument("--spec", required=True, help="key=value synthesis spec")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV})")
    s.add_argument("--seed", type=int, help="override configured base seed")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=_cmd_synth)

    y = sub.add_parser("saliency", help="occlusion sensitivity map for one point")
    y.add_argument("--checkpoint", required=True)
    y.add_argument("--left", required=True)
    y.add_argument("--right", required=True)
    y.add_argument("--x", type=int, required=True, help="probed column")
    y.add_argument("--y", type=int, required=True, help="probed row")
    y.add_argument("--out", required=True, help="output PFM path")
    y.add_argument("--patch", type=int, default=16)
    y.add_argument("--stride", type=int, default=8)
    y.add_argument("--raster", help="color preview path (default OUT.ppm)")
    y.set_defaults(func=_cmd_saliency)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
