"""Command-line entry point.

Subcommands: render-dataset, train, generate, evaluate, gradcheck, info.
Exit codes: 0 success, 1 runtime error, 2 usage error, 3 verification failure.
Errors are printed to stderr as a single machine-parsable line
`error: <ErrorClass>: <message>`. The VIEWSYNTH_DATA environment variable
supplies the default dataset root.
"""

import argparse
import os
import sys

import numpy as np

from . import tensor as tz
from .errors import ConfigError, InvalidArgumentError, ViewSynthError
from .network import (
    MICRO_CONFIG,
    AngleQuery,
    ViewNetConfig,
    build_viewnet,
    load_checkpoint,
)
from .renderer import (
    CLASS_IDS,
    DEFAULT_DISTANCE,
    DEFAULT_FOV,
    MANIFEST_NAME,
    DatasetManifest,
    angle_grid,
    evaluation_grid,
    generate_dataset,
)

DATA_ENV = "VIEWSYNTH_DATA"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VERIFY = 3


# ---------------------------------------------------------------------------
# run configuration: flat key-value file merged with command-line overrides


_TRAIN_KEYS = {
    "train.learning_rate": float,
    "train.iterations": int,
    "train.batch_size": int,
    "train.clip_low": float,
    "train.clip_high": float,
    "train.rgb_loss_weight": float,
    "train.depth_loss_weight": float,
    "train.adam_beta1": float,
    "train.adam_beta2": float,
    "train.adam_epsilon": float,
    "train.seed": int,
    "train.holdout_fraction": float,
    "train.checkpoint_interval": int,
}


def read_run_config(path):
    """Flat `section.key=value` file; unknown keys are rejected, not ignored."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if key not in _TRAIN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _TRAIN_KEYS[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def build_train_config(args):
    from .training import TrainConfig
    values = read_run_config(args.config) if args.config else {}
    # command-line flags override file values
    overrides = {
        "train.learning_rate": args.lr,
        "train.iterations": args.iters,
        "train.batch_size": args.batch,
        "train.seed": args.seed,
        "train.holdout_fraction": args.holdout,
        "train.checkpoint_interval": args.checkpoint_interval,
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    kwargs = {k.split(".", 1)[1]: v for k, v in values.items()}
    config = TrainConfig(**kwargs)
    config.validate()
    return config


def _limit_threads(n):
    """Best-effort cap on BLAS worker threads; 1 guarantees determinism."""
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    try:
        import ctypes
        for lib in ("libopenblas.so.0", "libopenblas.so"):
            try:
                ctypes.CDLL(lib).openblas_set_num_threads(int(n))
                return
            except (OSError, AttributeError):
                continue
    except Exception:
        pass


def _data_root(args):
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise ConfigError(f"no dataset root: pass --data or set {DATA_ENV}")
    return root


def _load_manifest(root):
    return DatasetManifest.load(os.path.join(root, MANIFEST_NAME))


def _parse_range(spec):
    lo, _, hi = spec.partition(":")
    return float(lo), float(hi or lo)


# ---------------------------------------------------------------------------
# subcommands


def cmd_render_dataset(args):
    _limit_threads(args.threads)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    pitch_range = _parse_range(args.pitch_range)
    grid = angle_grid(pitch_range, args.pitch_step, (0.0, 360.0), args.yaw_step,
                      distance=args.distance, fov=args.fov)
    man = generate_dataset(classes, args.instances, grid, args.size, args.out,
                           overwrite=args.overwrite)
    print(f"wrote {len(man.records)} views ({len(classes)} classes x "
          f"{args.instances} instances x {len(grid)} poses) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .training import train
    _limit_threads(args.threads)
    config = build_train_config(args)
    manifest = _load_manifest(_data_root(args))
    net_config = ViewNetConfig(input_size=manifest.size, class_id=args.class_id)
    net = build_viewnet(net_config, seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.txt"), "w") as f:
        f.write(config.to_kv())
        f.write(f"model.class_id={args.class_id}\n")
        f.write(f"model.input_size={manifest.size}\n")
    net, trace = train(net, manifest, args.class_id, config, out_dir=args.out)
    print(f"trained {args.class_id}: {len(trace)} iterations, "
          f"final loss {trace[-1].total_loss:.6f}, model at {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def _parse_angles(args):
    if args.angles:
        queries = []
        for part in args.angles.split(","):
            y, _, p = part.partition(":")
            queries.append(AngleQuery(delta_yaw=float(y), delta_pitch=float(p or 0.0)))
        return queries
    step = args.sweep_yaw
    n = int(round(360.0 / step))
    return [AngleQuery(delta_yaw=i * step, delta_pitch=args.pitch) for i in range(n)]


def cmd_generate(args):
    from .evaluation import generate_views, save_sequence
    from .extractor import ModelRegistry, detection_to_input, route, segment_background_threshold
    from .imaging import read_mask_png, read_rgb_png
    _limit_threads(args.threads)
    if args.angles is None and args.sweep_yaw is None:
        raise ConfigError("pass --angles or --sweep-yaw")
    registry = ModelRegistry.from_file(args.registry)
    net = route(args.class_id, registry, override=args.override_class)
    size = net.config.input_size

    rgb = read_rgb_png(args.input)
    if args.mask:
        mask = read_mask_png(args.mask)
        from .extractor import normalize_crop
        x = normalize_crop(rgb * mask, mask, size)
    elif args.auto_segment:
        detections = segment_background_threshold(rgb)
        if not detections:
            raise InvalidArgumentError(f"no foreground object found in {args.input}")
        largest = max(detections, key=lambda d: d.bbox[2] * d.bbox[3])
        x = detection_to_input(rgb, largest, size)
    else:
        raise ConfigError("pass --mask PATH or --auto-segment")

    queries = _parse_angles(args)
    rgb_out, dep_out = generate_views(net, x, queries)
    frames = [(rgb_out[i], dep_out[i]) for i in range(len(queries))]
    paths = save_sequence(frames, args.out)
    with open(os.path.join(args.out, "index.csv"), "w") as f:
        f.write("index,delta_yaw,delta_pitch,rgb,depth\n")
        for i, (q, (rp, dp)) in enumerate(zip(queries, paths)):
            f.write(f"{i},{q.delta_yaw},{q.delta_pitch},"
                    f"{os.path.basename(rp)},{os.path.basename(dp)}\n")
    print(f"wrote {len(paths)} rgb/depth pairs to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import EvalReport, continuity_score, evaluate_pairs, rotation_curve
    from .extractor import ModelRegistry
    from .tensor import Tensor
    from .training import split_instances
    _limit_threads(args.threads)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"output directory {args.out} is not empty; pass --force")
    registry = ModelRegistry.from_file(args.registry)
    manifest = _load_manifest(_data_root(args))
    for cls in registry.classes():
        if cls not in manifest.classes():
            raise ConfigError(f"registry class {cls!r} not present in the dataset manifest")
    grid = (evaluation_grid(manifest.distance, manifest.fov) if args.grid == "dense"
            else angle_grid((0.0, 30.0), 10.0, (0.0, 360.0), 12.0,
                            manifest.distance, manifest.fov))
    os.makedirs(args.out, exist_ok=True)
    report = EvalReport()
    for cls in registry.classes():
        net = registry.get(cls)
        _, holdout = split_instances(manifest, cls, args.holdout)
        instances = holdout or manifest.instances(cls)
        results = evaluate_pairs(net, manifest, grid, cls, instances,
                                 inputs_per_instance=args.inputs_per_instance)
        report.add(cls, results)
        curve = rotation_curve(results)
        with open(os.path.join(args.out, f"rotation_{cls}.csv"), "w") as f:
            f.write(curve.to_csv())
        rec = manifest.views(cls, instances[0])[0]
        rgb, _, mask = manifest.load_view(rec)
        x = Tensor(np.concatenate([rgb, mask], axis=0))
        cont = continuity_score(net, x)
        with open(os.path.join(args.out, f"continuity_{cls}.txt"), "w") as f:
            f.write(f"frames={cont.frames}\nmax_step={cont.max_step}\n"
                    f"mean_step={cont.mean_step}\nclosure_exact={cont.closure_exact}\n")
    with open(os.path.join(args.out, "report.csv"), "w") as f:
        f.write(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def _gradcheck_suite(dtype, seeds):
    """Finite-difference checks over every op plus the micro network."""
    from .network import encode_angles
    from .tensor import BatchNormState, Tensor

    worst = 0.0
    rows = []

    def check(name, f, shape, seed):
        nonlocal worst
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True, dtype=dtype)
        err = tz.grad_check(f, x)
        worst = max(worst, err)
        rows.append((name, seed, err))

    for seed in seeds:
        rng = np.random.default_rng(seed + 1000)
        k = Tensor(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)), dtype=dtype)
        b = Tensor(rng.uniform(-0.5, 0.5, 3), dtype=dtype)
        w = Tensor(rng.uniform(-0.5, 0.5, (5, 8)), dtype=dtype)
        wb = Tensor(rng.uniform(-0.5, 0.5, 5), dtype=dtype)
        gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=False, dtype=dtype)
        beta = Tensor(rng.uniform(-0.5, 0.5, 2), requires_grad=False, dtype=dtype)

        check("conv2d", lambda x: tz.sum_all(tz.conv2d(x, k, b)), (2, 2, 6, 6), seed)
        check("maxpool", lambda x: tz.sum_all(tz.maxpool2x2(x)), (2, 2, 6, 6), seed)
        check("fully_connected", lambda x: tz.sum_all(tz.fully_connected(x, w, wb)), (3, 8), seed)
        # relu checked away from zero: shift inputs off the kink
        check("relu", lambda x: tz.sum_all(tz.relu(tz.add(x, Tensor(np.full(x.shape, 0.01), dtype=dtype)))),
              (4, 5), seed)
        check("batchnorm", lambda x: tz.sum_all(tz.batchnorm(x, gamma, beta, BatchNormState(2, dtype=dtype), mode="train")),
              (4, 2, 3, 3), seed)
        check("bilinear_upsample2x", lambda x: tz.sum_all(tz.bilinear_upsample2x(x)), (2, 2, 4, 4), seed)
        check("concat", lambda x: tz.sum_all(tz.concat_channels(x, Tensor(np.ones((2, 3)), dtype=dtype))), (2, 5), seed)
        check("sigmoid", lambda x: tz.sum_all(tz.sigmoid(x)), (3, 4), seed)
        check("mse", lambda x: tz.mse_loss(x, Tensor(np.zeros(x.shape), dtype=dtype)), (3, 4), seed)

        net = build_viewnet(MICRO_CONFIG, seed=seed, dtype=dtype)
        net.set_train(False)
        angles = encode_angles([AngleQuery(30.0, 10.0), AngleQuery(-45.0, 0.0)], dtype=dtype)
        tgt_rgb = Tensor(np.random.default_rng(seed).random((2, 3, 16, 16)), dtype=dtype)
        tgt_dep = Tensor(np.random.default_rng(seed + 1).random((2, 1, 16, 16)), dtype=dtype)

        def micro_loss(x):
            rgb, dep = net.forward_batch(x, angles, mode="train")
            return tz.add(tz.mse_loss(rgb, tgt_rgb), tz.mse_loss(dep, tgt_dep))

        check("micro_viewnet", micro_loss, (2, 4, 16, 16), seed)
    return worst, rows


def cmd_gradcheck(args):
    if args.model != "micro":
        raise ConfigError(f"unknown gradcheck model {args.model!r}; only 'micro' is defined")
    dtype = {"f32": np.float32, "f64": np.float64}[args.precision]
    seeds = list(range(args.seeds))
    worst, rows = _gradcheck_suite(dtype, seeds)
    for name, seed, err in rows:
        print(f"{name:>20s} seed={seed} rel_err={err:.3e}")
    print(f"max relative error: {worst:.6e}")
    return EXIT_OK if worst <= 1e-3 else EXIT_VERIFY


def cmd_info(args):
    net = load_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    print(net.config.to_kv(), end="")
    n_params = sum(p.data.size for p in net.parameters.values())
    print(f"tensors={len(net.parameters)}")
    print(f"parameters={n_params}")
    print(f"dtype={net.dtype}")
    for name, st in sorted(net.norm_state.items()):
        print(f"norm.{name}.updates={st.updates}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser():
    parser = argparse.ArgumentParser(
        prog="viewsynth",
        description="Single-image novel-view RGB-D generation: dataset rendering, "
                    "training, generation, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-dataset", help="render a synthetic multi-view dataset")
    p.add_argument("--classes", default=",".join(CLASS_IDS),
                   help="comma-separated object classes")
    p.add_argument("--instances", type=int, default=20, help="instances per class")
    p.add_argument("--size", type=int, default=64, help="output image side length")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--pitch-range", default="0:30", help="pitch lo:hi in degrees")
    p.add_argument("--pitch-step", type=float, default=10.0, help="pitch step")
    p.add_argument("--yaw-step", type=float, default=12.0, help="yaw step")
    p.add_argument("--distance", type=float, default=DEFAULT_DISTANCE, help="camera orbit distance")
    p.add_argument("--fov", type=float, default=DEFAULT_FOV, help="camera field of view, degrees")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = deterministic)")
    p.set_defaults(func=cmd_render_dataset)

    p = sub.add_parser("train", help="train one per-class generator")
    p.add_argument("--class", dest="class_id", required=True, help="object class to train")
    p.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="flat key=value config file (train.* keys)")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--holdout", type=float, help="held-out instance fraction")
    p.add_argument("--checkpoint-interval", type=int, help="iterations between checkpoints")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = deterministic)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate novel views from one input image")
    p.add_argument("--input", required=True, help="input RGB PNG")
    p.add_argument("--mask", help="binary mask PNG for the object")
    p.add_argument("--auto-segment", action="store_true",
                   help="segment the object from a uniform background instead of --mask")
    p.add_argument("--class", dest="class_id", required=True, help="object class of the input")
    p.add_argument("--override-class", help="force another class's generator (conversion mode)")
    p.add_argument("--registry", required=True, help="class=checkpoint registry file")
    p.add_argument("--angles", help="comma list of yaw:pitch rotations, e.g. 0:0,30:10")
    p.add_argument("--sweep-yaw", type=float, help="full yaw sweep with this step")
    p.add_argument("--pitch", type=float, default=0.0, help="pitch used with --sweep-yaw")
    p.add_argument("--out", required=True, help="output directory for PNG pairs")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = deterministic)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generators against rendered ground truth")
    p.add_argument("--registry", required=True, help="class=checkpoint registry file")
    p.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--grid", choices=("train", "dense"), default="train",
                   help="pose grid: training grid or dense evaluation grid")
    p.add_argument("--holdout", type=float, default=0.2,
                   help="held-out instance fraction to evaluate (0 = all instances)")
    p.add_argument("--inputs-per-instance", type=int, default=5,
                   help="input views sampled per instance")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--threads", type=int, help="cap BLAS worker threads (1 = deterministic)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--model", default="micro", help="network size to check (micro)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64",
                   help="floating-point precision")
    p.add_argument("--seeds", type=int, default=5, help="number of random seeds")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print checkpoint metadata")
    p.add_argument("checkpoint", help="checkpoint file")
    p.set_defaults(func=cmd_info)

    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ViewSynthError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None):
    return dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
