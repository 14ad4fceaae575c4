"""Command-line harness.

Subcommands: check, gradcheck, tokens, fuse, train-toy, dump-attn, bench,
export-synth. Config values come from built-in defaults, then an optional
`key = value` config file, then flags; later sources win. Exit codes:
0 success, 1 check failure, 2 usage error, 3 I/O or format error.
"""

import argparse
import sys

from . import bench, checks, fusion, projector, synth, train, vspf
from . import tensor as T
from .projector import ProjectorConfig
from .tensor import TensorError


class UsageError(Exception):
    pass


_CONFIG_KEYS = {
    "variant": str,
    "grid": int,
    "enc_dim": int,
    "spatial_dim": int,
    "llm_dim": int,
    "crop_stride": int,
    "big_kernel": int,
    "no_dfi": bool,
    "seed": int,
    "f64": bool,
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(raw, key):
    low = raw.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")


def parse_config_file(path):
    """Flat `key = value` file; keys match the CLI flags."""
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = _CONFIG_KEYS[key]
        if kind is bool:
            values[key] = _parse_bool(raw, key)
        elif kind is int:
            try:
                values[key] = int(raw)
            except ValueError as e:
                raise UsageError(f"{path}:{lineno}: {key} needs an integer") from e
        else:
            values[key] = raw
    return values


def _add_config_flags(p):
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    p.add_argument("--variant", choices=("cropping", "pooling"))
    p.add_argument("--grid", type=int)
    p.add_argument("--enc-dim", type=int, dest="enc_dim")
    p.add_argument("--spatial-dim", type=int, dest="spatial_dim")
    p.add_argument("--llm-dim", type=int, dest="llm_dim")
    p.add_argument("--crop-stride", type=int, dest="crop_stride")
    p.add_argument("--big-kernel", type=int, dest="big_kernel")
    p.add_argument("--no-dfi", action="store_true", default=None, dest="no_dfi")
    p.add_argument("--seed", type=int)
    p.add_argument("--f64", action="store_true", default=None)
    p.add_argument("--out", help="output path or prefix")


def build_config(args):
    merged = {}
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    kwargs = {}
    for key, value in merged.items():
        if key == "no_dfi":
            kwargs["dfi_enabled"] = not value
        elif key == "f64":
            kwargs["dtype"] = "f64" if value else "f32"
        else:
            kwargs[key] = value
    try:
        return ProjectorConfig(**kwargs)
    except TensorError as e:
        raise UsageError(str(e)) from e


def _load_grid(args, cfg):
    if getattr(args, "features", None):
        return vspf.load_features(args.features, dtype=cfg.np_dtype)
    kind = getattr(args, "synth", None) or "noise"
    return synth.gen_synthetic_features(kind, cfg.grid, cfg.enc_dim,
                                        seed=cfg.seed, dtype=cfg.np_dtype)


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(args):
    cfg = build_config(args)
    results = checks.run_invariant_suite(cfg, oracle_instances=args.instances)
    report = checks.format_report(results)
    sys.stdout.write(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report)
    return 0 if all(r.passed for r in results) else 1


def cmd_gradcheck(args):
    # gradients are specified against 64-bit central differences
    cfg = build_config(args).with_overrides(dtype="f64")
    params = projector.init_params(cfg)
    grid = synth.gen_synthetic_features("noise", cfg.grid, cfg.enc_dim,
                                        seed=cfg.seed, dtype=cfg.np_dtype)

    def loss_fn(p):
        out = projector.projector_forward(cfg, grid, p)
        both = T.concat([out.spatial_tokens, out.patch_tokens], axis=0)
        return T.mean_all(T.mul(both, both))

    err = T.finite_diff_check(loss_fn, params, step=args.step,
                              samples_per_param=args.samples, seed=cfg.seed)
    print(f"max relative gradient error: {err:.3e} "
          f"({args.samples} coords per parameter, step {args.step:g})")
    return 0 if err <= 1e-4 else 1


def cmd_tokens(args):
    cfg = build_config(args)
    counts = projector.token_counts(cfg)
    print(f"variant:        {cfg.variant}")
    print(f"scale sizes:    {', '.join(str(s) for s in counts['scale_sizes'])}")
    print(f"spatial tokens: {counts['spatial']}")
    print(f"patch tokens:   {counts['patch']}")
    print(f"big map tokens: {counts['big_map']}")
    print(f"visual tokens:  {counts['visual']}")
    return 0


def cmd_fuse(args):
    cfg = build_config(args)
    grid = _load_grid(args, cfg)
    params = projector.init_params(cfg)
    with T.no_grad():
        out = projector.projector_forward(cfg, grid, params)
    prefix = args.out or "fused"
    vspf.save_features(f"{prefix}.hvs.vspf", out.spatial_tokens)
    vspf.save_features(f"{prefix}.hvp.vspf", out.patch_tokens)
    written = [f"{prefix}.hvs.vspf", f"{prefix}.hvp.vspf"]
    if out.fusion is not None:
        with open(f"{prefix}.attn.csv", "w", encoding="utf-8") as fh:
            fh.write(fusion.attention_csv(out.fusion))
        written.append(f"{prefix}.attn.csv")
    print(f"spatial tokens: {tuple(out.spatial_tokens.shape)}")
    print(f"patch tokens:   {tuple(out.patch_tokens.shape)}")
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_train_toy(args):
    cfg = build_config(args)
    task = train.make_toy_task(cfg, num_samples=args.samples, seed=cfg.seed + 1)
    result = train.toy_train(cfg, task, steps=args.steps, lr=args.lr)
    print(f"initial loss: {result.initial_loss:.6f}")
    for i, loss in enumerate(result.losses, 1):
        print(f"step {i:4d}  loss {loss:.6f}")
    final = result.losses[-1]
    ratio = final / result.initial_loss if result.initial_loss else 1.0
    print(f"final loss: {final:.6f} ({ratio:.1%} of initial)")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            fh.write(f"0,{result.initial_loss!r}\n")
            for i, loss in enumerate(result.losses, 1):
                fh.write(f"{i},{loss!r}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_dump_attn(args):
    cfg = build_config(args)
    if not cfg.dfi_enabled:
        raise UsageError("attention export requires detail fusion "
                         "(drop --no-dfi)")
    grid = _load_grid(args, cfg)
    params = projector.init_params(cfg)
    with T.no_grad():
        out = projector.projector_forward(cfg, grid, params)
    csv_text = fusion.attention_csv(out.fusion)
    path = args.out or "attention.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    n, m = out.fusion.attention.shape
    print(f"wrote {path} ({n} queries x {m} keys)")
    return 0


def cmd_bench(args):
    cfg = build_config(args)
    visual = cfg.num_visual_tokens
    baseline = args.baseline_tokens or cfg.num_patch_tokens
    flops = bench.prefill_flops(visual, cfg.llm_dim, args.layers)
    ratios = bench.prefill_ratio(visual, baseline, cfg.llm_dim, args.layers)
    print(f"prefill FLOPs at {visual} tokens "
          f"(dim {cfg.llm_dim}, {args.layers} layers):")
    print(f"  linear term:    {flops['linear']:.4e}")
    print(f"  quadratic term: {flops['quadratic']:.4e}")
    print(f"ratios vs {baseline} tokens:")
    print(f"  linear:    {ratios['linear']:.6f}")
    print(f"  quadratic: {ratios['quadratic']:.6f}")
    print(f"  total:     {ratios['total']:.6f}")
    result = bench.measure_projector(cfg, iterations=args.iters,
                                     warmup=args.warmup, seed=cfg.seed)
    print(f"projector forward: {result.seconds_per_forward * 1e3:.3f} ms "
          f"over {result.iterations} iterations")
    for stage in (*projector.SPATIAL_STAGES, *projector.PATCH_STAGES):
        if stage in result.stage_seconds:
            print(f"  {stage:<12} {result.stage_seconds[stage] * 1e3:.3f} ms")
    print(f"spatial branch fraction: {result.spatial_fraction:.1%}")
    return 0


def cmd_export_synth(args):
    cfg = build_config(args)
    grid = synth.gen_synthetic_features(args.kind, cfg.grid, cfg.enc_dim,
                                        seed=cfg.seed, value=args.value,
                                        dtype=cfg.np_dtype)
    path = args.out or f"{args.kind}.vspf"
    vspf.save_features(path, grid)
    print(f"wrote {path} {tuple(grid.shape)} {grid.dtype}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vsp",
        description="Spatial-token visual projector harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the invariant suite")
    _add_config_flags(p)
    p.add_argument("--instances", type=int, default=200,
                   help="random instances per operator oracle")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all gradients")
    _add_config_flags(p)
    p.add_argument("--samples", type=int, default=20,
                   help="coordinates probed per parameter")
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("tokens", help="print token accounting for a config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_tokens)

    p = sub.add_parser("fuse", help="run the projector on a feature file")
    _add_config_flags(p)
    p.add_argument("features", nargs="?",
                   help="VSPF feature file (default: synthetic noise)")
    p.add_argument("--synth", choices=synth.KINDS,
                   help="use a synthetic grid instead of a file")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("train-toy", help="toy alignment training run")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=2)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("dump-attn", help="export attention weights as CSV")
    _add_config_flags(p)
    p.add_argument("--features", help="VSPF feature file")
    p.add_argument("--synth", choices=synth.KINDS,
                   help="synthetic input kind (default noise)")
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("bench", help="prefill cost model and projector timing")
    _add_config_flags(p)
    p.add_argument("--layers", type=int, default=32)
    p.add_argument("--baseline-tokens", type=int, dest="baseline_tokens",
                   help="token count to compare against (default: patch only)")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-synth", help="write a synthetic feature file")
    _add_config_flags(p)
    p.add_argument("--kind", choices=synth.KINDS, default="noise")
    p.add_argument("--value", type=float, default=1.0,
                   help="fill value for the constant kind")
    p.set_defaults(func=cmd_export_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except vspf.FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except (TensorError, T.NumericsError, projector.StageError,
            train.DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
