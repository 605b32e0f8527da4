"""Command-line entry point: data synthesis, RGB simulation, training,
evaluation, gradient checking, and parameter/FLOP accounting.

Precedence for every setting: CLI flag > config file (flat key=value) >
ECT_SEED env var (seed only) > built-in default.  Machine-readable output
goes to stdout as "RESULT key=value ..." lines.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from ect import tensor as T
from ect import datapipe as dp
from ect.network import (BlockSpec, EctConfig, build, count_flops, load_checkpoint,
                         save_checkpoint, tiny_config)
from ect.tensor import Tensor, grad_check

DESK_DEFAULTS = dict(total_iters=2000, batch_size=4, patch_size=32)
PAPER_DEFAULTS = dict(total_iters=300_000, batch_size=20, patch_size=128)


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (want key=value): {line!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def _resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill None-valued flags from the config file, then defaults."""
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}
    defaults = dict(
        stages=2, base_channels=32, cross_c=4, cross_s=2, cross_k=12,
        inter_c=16, inter_s=4, inter_k=8, precision="f32", profile="desk",
        out="out", seed=None, lr_max=4e-4, total_iters=None, batch_size=None,
        patch_size=None, size=64, materials=4, images=2, quality=85,
        shot_gain=0.01, dark_std=0.005,
    )
    casts = dict(seed=int, total_iters=int, batch_size=int, patch_size=int)
    for key, dflt in defaults.items():
        if getattr(args, key, None) is None:
            if key in file_cfg:
                cast = casts.get(key) or (type(dflt) if dflt is not None else str)
                setattr(args, key, cast(file_cfg[key]))
            elif hasattr(args, key):
                setattr(args, key, dflt)
    if getattr(args, "seed", None) is None:
        args.seed = int(os.environ.get("ECT_SEED", "0"))
    else:
        args.seed = int(args.seed)
    profile = getattr(args, "profile", "desk")
    prof = PAPER_DEFAULTS if profile == "paper" else DESK_DEFAULTS
    for key, val in prof.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    return args


def _model_config(args) -> EctConfig:
    return EctConfig(
        stages=args.stages, base_channels=args.base_channels,
        cross=BlockSpec(args.cross_c, args.cross_s, args.cross_k),
        inter=BlockSpec(args.inter_c, args.inter_s, args.inter_k),
        use_sd3d=not getattr(args, "ablate_sd3d", False),
        use_dlrm=not getattr(args, "ablate_dlrm", False),
    )


def _result(**kv) -> None:
    print("RESULT " + " ".join(f"{k}={v}" for k, v in kv.items()))


def cmd_params(args) -> int:
    model = build(_model_config(args), seed=args.seed)
    _result(params=model.count_params(), stages=args.stages)
    return 0


def cmd_flops(args) -> int:
    model = build(_model_config(args), seed=args.seed)
    fl, sheet = count_flops(model, args.height, args.width)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "flops_breakdown.txt"), "w") as f:
            f.write(sheet + "\n")
    _result(flops=fl, gflops=f"{fl / 1e9:.3f}", height=args.height, width=args.width)
    return 0


def cmd_gradcheck(args) -> int:
    with T.precision("f64"):
        cfg = tiny_config() if args.tiny else _model_config(args)
        model = build(cfg, seed=args.seed)
        rng = np.random.default_rng(args.seed)
        # O(1) parameter values keep finite differences out of roundoff range
        for p in model.params():
            p.data[...] = rng.normal(0.0, 0.3, size=p.shape)
        x = Tensor(rng.random((3, 16, 16)))
        ref = Tensor(rng.normal(size=(31, 16, 16)))
        err = grad_check(lambda: T.mean(T.mul(model.forward(x), ref)),
                         model.params(), max_coords_per_param=args.coords, seed=args.seed)
    ok = err <= 1e-4
    _result(max_rel_err=f"{err:.3e}", threshold="1e-4", passed=ok)
    return 0 if ok else 1


def cmd_synth_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    pairs = []
    srf = dp.default_srf()
    sim = dp.SimConfig(shot_gain=args.shot_gain, dark_std=args.dark_std,
                       jpeg_quality=args.quality, seed=args.seed)
    for i in range(args.images):
        hsi = dp.synth_hsi(args.seed + i, args.size, args.size, args.materials)
        rgb = dp.simulate_rgb(hsi, srf, sim, seed=args.seed ^ (i + 1))
        hsi_path = os.path.join(args.out, f"scene{i:03d}.hsi")
        rgb_path = os.path.join(args.out, f"scene{i:03d}.rgbf")
        dp.write_hsi(hsi_path, hsi)
        dp.write_hsi(rgb_path, rgb.astype(np.float32))  # float RGB container, bands=3
        dp.write_ppm(os.path.join(args.out, f"scene{i:03d}.ppm"), rgb)
        pairs.append((rgb_path, hsi_path))
    manifest = os.path.join(args.out, "manifest.tsv")
    dp.write_manifest(manifest, pairs)
    _result(images=args.images, manifest=manifest)
    return 0


def cmd_simulate_rgb(args) -> int:
    hsi = dp.read_hsi(args.hsi)
    srf = dp.default_srf() if args.srf is None else np.loadtxt(args.srf, delimiter=",", skiprows=1)[:, 1:]
    sim = dp.SimConfig(shot_gain=args.shot_gain, dark_std=args.dark_std,
                       jpeg_quality=args.quality, mosaic=args.mosaic, seed=args.seed)
    rgb = dp.simulate_rgb(hsi, srf, sim)
    dp.write_hsi(args.rgb_out, rgb.astype(np.float32))
    if args.ppm:
        dp.write_ppm(args.ppm, rgb)
    _result(rgb=args.rgb_out, mean=f"{rgb.mean():.6f}")
    return 0


def _load_pairs(manifest: str) -> list:
    pairs = []
    for rgb_path, hsi_path in dp.read_manifest(manifest):
        pairs.append((dp.read_hsi(rgb_path).astype(np.float64),
                      dp.read_hsi(hsi_path).astype(np.float64)))
    return pairs


def cmd_train(args) -> int:
    from ect.trainkit import TrainConfig, train, train_two_stage

    T.set_default_dtype(args.precision)
    os.makedirs(args.out, exist_ok=True)
    pairs = _load_pairs(args.manifest)
    tcfg = TrainConfig(lr_max=args.lr_max, total_iters=args.total_iters,
                       batch_size=args.batch_size, patch_size=args.patch_size,
                       seed=args.seed)
    if args.two_stage:
        def builder(stages):
            mcfg = _model_config(args)
            mcfg.stages = stages
            return build(mcfg, seed=args.seed)
        model, res1, res2 = train_two_stage(builder, pairs, tcfg, args.out, log=print)
        _result(stage1_final=f"{res1.final_mrae:.5f}", final=f"{res2.final_mrae:.5f}",
                iters=res1.iters_run + res2.iters_run)
    else:
        model = build(_model_config(args), seed=args.seed)
        res = train(model, pairs, tcfg, out_dir=args.out, log=print)
        _result(final=f"{res.final_mrae:.5f}", iters=res.iters_run)
    return 0


def cmd_eval(args) -> int:
    from ect.trainkit import evaluate

    T.set_default_dtype(args.precision)
    model = build(_model_config(args), seed=args.seed)
    load_checkpoint(model, args.checkpoint)
    pairs = _load_pairs(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    rep = evaluate(model, pairs, out_dir=args.out if args.heatmaps else None)
    m = rep["mean"]
    _result(mrae=f"{m['mrae']:.5f}", rmse=f"{m['rmse']:.5f}",
            psnr=f"{m['psnr']:.3f}", sam=f"{m['sam']:.5f}", images=len(pairs))
    return 0


def cmd_heatmap(args) -> int:
    args.heatmaps = True
    return cmd_eval(args)


def cmd_convert(args) -> int:
    dp.convert_ntire_archive(args.archive)
    return 0  # unreachable; convert_ntire_archive always raises


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stages", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--cross-c", type=int, dest="cross_c")
    p.add_argument("--cross-s", type=int, dest="cross_s")
    p.add_argument("--cross-k", type=int, dest="cross_k")
    p.add_argument("--inter-c", type=int, dest="inter_c")
    p.add_argument("--inter-s", type=int, dest="inter_s")
    p.add_argument("--inter-k", type=int, dest="inter_k")
    p.add_argument("--ablate-sd3d", action="store_true", dest="ablate_sd3d",
                   help="replace SD3D with spectral-wise tokens (c=1, s=1)")
    p.add_argument("--ablate-dlrm", action="store_true", dest="ablate_dlrm",
                   help="replace the dependence map with identity")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ect", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="exact parameter count")
    _add_model_flags(p); _add_common_flags(p)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("flops", help="analytic FLOP count at a given size")
    _add_model_flags(p); _add_common_flags(p)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_model_flags(p); _add_common_flags(p)
    p.add_argument("--tiny", action="store_true", default=True,
                   help="use the tiny verification config (default)")
    p.add_argument("--full", action="store_false", dest="tiny")
    p.add_argument("--coords", type=int, default=3,
                   help="probed coordinates per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="generate synthetic HSI/RGB pairs")
    _add_common_flags(p)
    p.add_argument("--images", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--materials", type=int)
    p.add_argument("--quality", type=int)
    p.add_argument("--shot-gain", type=float, dest="shot_gain")
    p.add_argument("--dark-std", type=float, dest="dark_std")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("simulate-rgb", help="run the HSI->RGB camera pipeline")
    _add_common_flags(p)
    p.add_argument("--hsi", required=True)
    p.add_argument("--rgb-out", required=True, dest="rgb_out")
    p.add_argument("--ppm")
    p.add_argument("--srf", help="CSV with wavelength,r,g,b rows")
    p.add_argument("--quality", type=int)
    p.add_argument("--shot-gain", type=float, dest="shot_gain")
    p.add_argument("--dark-std", type=float, dest="dark_std")
    p.add_argument("--mosaic", action="store_true",
                   help="Bayer RGGB variant: mosaic before noise, demosaic after")
    p.set_defaults(fn=cmd_simulate_rgb)

    p = sub.add_parser("train", help="train on a manifest of rgb/hsi pairs")
    _add_model_flags(p); _add_common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--lr-max", type=float, dest="lr_max")
    p.add_argument("--total-iters", type=int, dest="total_iters")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--two-stage", action="store_true", dest="two_stage")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_model_flags(p); _add_common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--heatmaps", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="emit MRAE heatmaps for a checkpoint")
    _add_model_flags(p); _add_common_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("convert", help="NTIRE archive converter (stub)")
    _add_common_flags(p)
    p.add_argument("--archive", required=True)
    p.set_defaults(fn=cmd_convert)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # argparse exits 2 on usage errors
    try:
        args = _resolve(args)
        if getattr(args, "precision", None):
            T.set_default_dtype(args.precision)
        return args.fn(args)
    except Exception as exc:  # runtime errors -> exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
