"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long option names (dashes or underscores).  Explicit flags win
over the file.  Reports go to stdout as ``key=value`` records and to stderr
as a short table.

Exit codes: 0 ok, 2 format error, 3 config error, 4 tracking failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from . import container, hybrid, ingest, pca, selector, shapes, tracker, volume
from .errors import AssociationError, ConfigError, FormatError, TrackingFailure

log = logging.getLogger("tsdfcodec")

EXIT_OK, EXIT_FORMAT, EXIT_CONFIG, EXIT_TRACKING = 0, 2, 3, 4


def read_config(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _records(pairs: dict) -> None:
    for k, v in pairs.items():
        if isinstance(v, float):
            v = f"{v:.9g}"
        print(f"{k}={v}")


def _table(pairs: dict) -> None:
    width = max((len(k) for k in pairs), default=0)
    for k, v in pairs.items():
        v = f"{v:.6g}" if isinstance(v, float) else v
        print(f"  {k:<{width}}  {v}", file=sys.stderr)


def report(pairs: dict) -> None:
    _records(pairs)
    _table(pairs)


def _floats(text, n=None):
    vals = [float(x) for x in str(text).replace(",", " ").split()]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {text!r}")
    return vals


def _load_blocks(paths) -> np.ndarray:
    return np.concatenate([shapes.load_dataset(p) for p in paths])


def _load_map(path, codec_paths=()) -> volume.TsdfVolume:
    """A TSDF volume file, or a compressed map decoded with a matching codec."""
    buf = Path(path).read_bytes()
    if buf[:4] == b"TMAP":
        cmap = container.CompressedMap.from_bytes(buf)
        return container.decompress(cmap, container.resolve_codec(cmap, codec_paths))
    return volume.from_bytes(buf)


def _intrinsics(args) -> ingest.Intrinsics:
    if not args.intrinsics:
        raise ConfigError("intrinsics are required (fx fy cx cy)")
    try:
        return ingest.Intrinsics.parse(args.intrinsics)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _frames(args):
    return list(ingest.iter_sequence(args.sequence, _intrinsics(args), args.depth_scale, args.step, args.limit))


def _groundtruth(args) -> ingest.Trajectory:
    path = args.groundtruth or Path(args.sequence) / "groundtruth.txt"
    return ingest.parse_trajectory(path)


def _train_cfg(args) -> ae.TrainConfig:
    try:
        return ae.TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                              momentum=args.momentum, max_epochs=args.max_epochs, patience=args.patience,
                              rel_tol=args.rel_tol, rng_seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- subcommands ------------------------------------------------------------

def cmd_generate(args):
    try:
        spec = shapes.DatasetSpec(args.count, args.seed, args.empty_fraction, args.emptiness_threshold,
                                  voxel_size=args.voxel_size)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = shapes.generate_dataset(spec)
    shapes.save_dataset(ds.blocks, args.out)
    counts = {f"count_{c}": int(np.sum(ds.categories == c)) for c in shapes.CATEGORIES}
    report({"blocks": len(ds.blocks), "empty": int(ds.empty.sum()), **counts, "out": args.out})


def cmd_harvest(args):
    vol = _load_map(args.volume)
    blocks = ingest.harvest_subvolumes(vol, args.stride, args.emptiness_threshold, args.empty_fraction)
    shapes.save_dataset(blocks, args.out)
    report({"blocks": len(blocks), "out": args.out})


def cmd_fuse(args):
    gt = _groundtruth(args)
    dims = [int(x) for x in _floats(args.dims, 3)]
    vol = volume.TsdfVolume.empty(dims, args.voxel_size, _floats(args.origin, 3))
    used = skipped = 0
    for frame in _frames(args):
        try:
            pose = ingest.associate(gt, frame.timestamp, args.max_dt)
        except AssociationError:
            skipped += 1
            continue
        ingest.fuse_frame(vol, frame, pose, args.w_max)
        used += 1
    volume.save(vol, args.out)
    report({"frames_fused": used, "frames_skipped": skipped, "observed_voxels": int((vol.weights > 0).sum()),
            "out": args.out})


def cmd_fit_pca(args):
    data = _load_blocks(args.data)
    codec = pca.fit(data, args.k)
    pca.save(codec, args.out)
    mse = float(np.mean((codec.decode(codec.encode(data)) - data) ** 2))
    report({"codec_id": codec.codec_id, "training_blocks": len(data), "training_mse": mse,
            "padded_components": codec.n_padded, "out": args.out})


def cmd_train_ae(args):
    data = _load_blocks(args.data)
    net = ae.init(ae.default_layer_sizes(args.code_length), args.seed)
    net, curve = ae.train(net, data, _train_cfg(args))
    ae.save(net, args.out)
    report({"codec_id": net.codec_id, "epochs": len(curve.validation_mse), "best_epoch": curve.best_epoch,
            "initial_validation_mse": curve.initial_validation_mse,
            "best_validation_mse": min(curve.validation_mse, default=curve.initial_validation_mse),
            "test_mse": curve.test_mse, "out": args.out})


def cmd_fit_hybrid(args):
    data = _load_blocks(args.data)
    first = pca.load(args.pca) if args.pca else None
    fit = hybrid.fit_parallel if args.mode == "parallel" else hybrid.sequential_fit
    try:
        codec = fit(data, args.pca_dims, args.ann_dims, _train_cfg(args), args.seed, first)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    hybrid.save(codec, args.out)
    w = codec.w if args.mode == "parallel" else codec.w2
    mse = float(np.mean((codec.decode(codec.encode(data)) - data) ** 2))
    report({"codec_id": codec.codec_id, "mode": args.mode, "weight": float(w), "training_mse": mse, "out": args.out})


def cmd_track(args):
    vol = _load_map(args.map, args.codec or ())
    frames = _frames(args)
    if not frames:
        raise FormatError("sequence has no frames")
    if args.init_identity:
        init = ingest.Pose.identity(frames[0].timestamp)
    else:
        init = ingest.associate(_groundtruth(args), frames[0].timestamp, args.max_dt)
    cfg = tracker.TrackerConfig(huber_delta=args.huber_delta, point_subsample_stride=args.point_stride,
                                max_iterations=args.max_iterations)
    est = tracker.estimate_trajectory(vol, frames, init, cfg)
    ingest.write_trajectory(est, args.out)
    n_failed = int(np.sum(est.failed))
    report({"frames": len(est), "failed_frames": n_failed, "out": args.out})
    if n_failed and not args.allow_failures:
        raise TrackingFailure(f"{n_failed} frame(s) failed to track")


def cmd_evaluate_ate(args):
    est = ingest.parse_trajectory(args.estimate)
    gt = ingest.parse_trajectory(args.groundtruth)
    r = tracker.ate(est, gt, args.max_dt)
    report({"pairs": len(r.per_pose), "ate_mean": r.mean, "ate_median": r.median, "ate_rmse": r.rmse,
            "ate_max": float(r.per_pose.max())})


def cmd_build_plane_model(args):
    codec = container.load_codec(args.codec)
    model = selector.build_plane_model(codec, voxel_size=args.voxel_size, threshold=args.threshold, label=args.label)
    selector.save(model, args.out)
    report({"codec_id": model.codec_id, "codes": len(model.codes), "threshold": model.threshold, "out": args.out})


def cmd_select(args):
    cmap = container.load(args.map)
    model = selector.load(args.model)
    codec = container.resolve_codec(cmap, args.codec or ())
    dist, flags = selector.match_blocks(cmap, model, args.threshold)
    part = selector.selective_decompress(cmap, flags, codec)
    volume.save(part, args.out)
    if args.flags:
        Path(args.flags).write_text("".join(f"{int(f)} {d:.9g}\n" for f, d in zip(flags, dist)))
    report({"blocks": cmap.n_blocks, "coded": cmap.n_coded, "flagged": int(flags.sum()),
            "threshold": float(model.threshold if args.threshold is None else args.threshold), "out": args.out})


def cmd_blur(args):
    vol = _load_map(args.volume, args.codec or ())
    try:
        out = volume.gaussian_blur(vol, args.kernel_size, args.sigma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    volume.save(out, args.out)
    report({"kernel_size": args.kernel_size, "sigma": args.sigma, "out": args.out})


def cmd_compress(args):
    vol = volume.load(args.volume)
    codec = container.load_codec(args.codec)
    cmap = container.compress(vol, codec, args.empty_threshold, args.inline,
                              (args.codec_d_min, args.codec_d_max), args.workers)
    container.save(cmap, args.out)
    report({"codec_id": cmap.codec_id, **cmap.sizes(), "out": args.out})


def cmd_decompress(args):
    cmap = container.load(args.map)
    codec = container.resolve_codec(cmap, args.codec or ())
    vol = container.decompress(cmap, codec, args.workers)
    volume.save(vol, args.out)
    report({"codec_id": cmap.codec_id, "decoded_blocks": cmap.n_coded, "out": args.out})


def cmd_evaluate_recon(args):
    a = volume.load(args.original)
    b = _load_map(args.reconstructed, args.codec or ())
    if not a.same_geometry(b):
        raise ConfigError("volumes differ in geometry")
    rep = container.evaluate_recon(a, b, args.empty_threshold)
    for line in rep.records():
        print(line)
    print(rep.table(), file=sys.stderr)


# -- parser -----------------------------------------------------------------

def _sequence_args(p):
    p.add_argument("--sequence", required=True, help="TUM-layout directory with depth.txt")
    p.add_argument("--intrinsics", help="fx fy cx cy")
    p.add_argument("--depth-scale", type=float, default=ingest.TUM_DEPTH_SCALE)
    p.add_argument("--groundtruth", help="defaults to SEQUENCE/groundtruth.txt")
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--limit", type=int)
    p.add_argument("--max-dt", type=float, default=0.02)


def _train_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--max-epochs", type=int, default=500)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--rel-tol", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsdfcodec", description="Block codecs for TSDF maps.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value defaults; flags win")
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, "sample a synthetic block dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--empty-fraction", type=float, default=0.02)
    p.add_argument("--emptiness-threshold", type=float, default=0.85)
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--out", required=True)

    p = add("harvest", cmd_harvest, "cut training windows out of a fused volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--emptiness-threshold", type=float, default=0.85)
    p.add_argument("--empty-fraction", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("fuse", cmd_fuse, "fuse a depth sequence with known poses")
    _sequence_args(p)
    p.add_argument("--dims", required=True, help="nx ny nz")
    p.add_argument("--voxel-size", type=float, required=True)
    p.add_argument("--origin", default="0 0 0")
    p.add_argument("--w-max", type=float, default=ingest.W_MAX)
    p.add_argument("--out", required=True)

    p = add("fit-pca", cmd_fit_pca, "fit a PCA codec")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--k", type=int, default=31, help="components; code length is k + 1")
    p.add_argument("--out", required=True)

    p = add("train-ae", cmd_train_ae, "train an autoencoder codec")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--code-length", type=int, default=32)
    _train_args(p)
    p.add_argument("--out", required=True)

    p = add("fit-hybrid", cmd_fit_hybrid, "fit a parallel or sequential PCA + autoencoder codec")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--mode", choices=("parallel", "sequential"), default="parallel")
    p.add_argument("--pca-dims", type=int, default=64)
    p.add_argument("--ann-dims", type=int, default=64)
    p.add_argument("--pca", help="reuse an existing PCA codec for the first stage")
    _train_args(p)
    p.add_argument("--out", required=True)

    p = add("track", cmd_track, "estimate a trajectory against a map")
    p.add_argument("--map", required=True, help="TSDF volume or compressed map")
    p.add_argument("--codec", nargs="*", help="codec files for compressed maps")
    _sequence_args(p)
    p.add_argument("--init-identity", action="store_true", help="start at the identity instead of ground truth")
    p.add_argument("--huber-delta", type=float, default=0.02)
    p.add_argument("--point-stride", type=int, default=2)
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--allow-failures", action="store_true", help="exit 0 even if frames failed")
    p.add_argument("--out", required=True)

    p = add("evaluate-ate", cmd_evaluate_ate, "absolute trajectory error")
    p.add_argument("--estimate", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--max-dt", type=float, default=0.02)

    p = add("build-plane-model", cmd_build_plane_model, "descriptor model of horizontal planes")
    p.add_argument("--codec", required=True)
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--label", default="floor")
    p.add_argument("--out", required=True)

    p = add("select", cmd_select, "flag blocks matching a descriptor model and decode only those")
    p.add_argument("--map", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--codec", nargs="*")
    p.add_argument("--threshold", type=float, help="override the model threshold")
    p.add_argument("--flags", help="write 'flag distance' per block")
    p.add_argument("--out", required=True)

    p = add("blur", cmd_blur, "separable Gaussian blur of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--codec", nargs="*")
    p.add_argument("--kernel-size", type=int, default=9)
    p.add_argument("--sigma", type=float, default=4 / 3)
    p.add_argument("--out", required=True)

    p = add("compress", cmd_compress, "encode a volume into a compressed map")
    p.add_argument("--volume", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--empty-threshold", type=float, default=container.EMPTY_THRESHOLD)
    p.add_argument("--inline", action="store_true", help="embed the codec in the map")
    p.add_argument("--codec-d-min", type=float, default=volume.D_MIN, help="truncation the codec was trained with")
    p.add_argument("--codec-d-max", type=float, default=volume.D_MAX)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("decompress", cmd_decompress, "decode a compressed map into a volume")
    p.add_argument("--map", required=True)
    p.add_argument("--codec", nargs="*")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("evaluate-recon", cmd_evaluate_recon, "per-block MSE of a reconstruction")
    p.add_argument("--original", required=True)
    p.add_argument("--reconstructed", required=True, help="TSDF volume or compressed map")
    p.add_argument("--codec", nargs="*")
    p.add_argument("--empty-threshold", type=float, default=container.EMPTY_THRESHOLD)
    return parser


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(sub: argparse.ArgumentParser, cfg: dict) -> None:
    actions = {a.dest: a for a in sub._actions}
    unknown = set(cfg) - set(actions) - {"config"}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    defaults = {}
    for key, raw in cfg.items():
        if key == "config":
            continue
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
            value = raw.lower() in ("true", "1", "yes")
        else:
            conv = a.type or str
            try:
                value = [conv(x) for x in raw.split()] if a.nargs in ("+", "*") else conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        if a.choices is not None and value not in a.choices:
            raise ConfigError(f"{key}: {value!r} not in {sorted(a.choices)}")
        defaults[key] = value
        a.required = False
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path is not None:
        choices = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in choices), None)
        if command is not None:
            _apply_config(choices[command], read_config(path))
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrackingFailure as exc:
        print(f"tracking failure: {exc}", file=sys.stderr)
        return EXIT_TRACKING
    except (FileNotFoundError, AssociationError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
