"""Reconstruction error and tracking accuracy per codec on a synthetic room.

Fuses a noisy depth sequence, trains every codec on synthetic blocks plus
blocks harvested from other rooms, then tracks the same sequence against
each decoded map and prints one row per map.

    python3 scripts/synthetic_table.py --frames 30 --voxel-size 0.02
"""
import argparse
import logging
import time

import numpy as np

from tsdfcodec import autoencoder as ae
from tsdfcodec import container, hybrid, pca, synth, tracker, volume
from tsdfcodec.ingest import Trajectory, fuse_frame, harvest_subvolumes
from tsdfcodec.shapes import DatasetSpec, generate_dataset


def fused_room(seed, n_frames, voxel_size, noise):
    scene = synth.cluttered_room(seed)
    path = synth.camera_path(n_frames)
    rng = np.random.default_rng(seed)
    frames = [synth.render_frame(scene.sdf, p, noise_sigma=noise, rng=rng) for p in path]
    dims = tuple(int(round(e / voxel_size)) for e in synth.ROOM_EXTENT)
    vol = volume.TsdfVolume.empty(dims, voxel_size)
    for f, p in zip(frames, path):
        fuse_frame(vol, f, p)
    return frames, path, vol


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=30)
    ap.add_argument("--voxel-size", type=float, default=0.02)
    ap.add_argument("--noise", type=float, default=0.01)
    ap.add_argument("--synthetic-blocks", type=int, default=4000)
    ap.add_argument("--epochs", type=int, default=30, help="autoencoder epoch cap")
    ap.add_argument("--skip-nets", action="store_true", help="PCA and blur rows only")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    frames, path, raw = fused_room(0, args.frames, args.voxel_size, args.noise)
    gt = Trajectory.from_poses(path)
    others = [harvest_subvolumes(fused_room(s, 10, args.voxel_size, args.noise)[2]) for s in (11, 12, 13)]
    data = np.vstack([generate_dataset(DatasetSpec(args.synthetic_blocks, 1, voxel_size=args.voxel_size)).blocks,
                      *others])
    print(f"training blocks: {len(data)}")

    codecs = {f"pca{k + 1}": pca.fit(data, k) for k in (31, 63, 127)}
    if not args.skip_nets:
        cfg = ae.TrainConfig(max_epochs=args.epochs)
        for d in (32, 64, 128):
            codecs[f"ae{d}"] = ae.train(ae.init(ae.default_layer_sizes(d)), data, cfg)[0]
        codecs["parallel64+64"] = hybrid.fit_parallel(data, train_cfg=cfg, pca_codec=codecs["pca64"])
        codecs["sequential64+64"] = hybrid.sequential_fit(data, train_cfg=cfg, pca_codec=codecs["pca64"])

    maps = {"raw": raw, "blur": volume.gaussian_blur(raw)}
    for name, codec in codecs.items():
        maps[name] = container.decompress(container.compress(raw, codec), codec)

    print(f"{'map':>16} {'block mse':>10} {'ate mean':>9} {'median':>9} {'fails':>5} {'secs':>6}")
    for name, vol in maps.items():
        mse = container.evaluate_recon(raw, vol).mean
        t0 = time.perf_counter()
        est = tracker.estimate_trajectory(vol, frames, path[0])
        res = tracker.ate(est, gt)
        print(f"{name:>16} {mse:>10.5f} {res.mean:>9.4f} {res.median:>9.4f} {int(est.failed.sum()):>5d} "
              f"{time.perf_counter() - t0:>6.1f}")


if __name__ == "__main__":
    main()
