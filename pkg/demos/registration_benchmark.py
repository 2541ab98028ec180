"""Registration oracle and paired benchmark.

Builds rigid transforms with noise and outliers, recovers them with FilterReg,
then aligns perturbed scene predictions with FilterReg and ICP and compares
the scene Chamfer distance each method leaves behind.

    python demos/registration_benchmark.py [trials]
"""
import sys
import time

import numpy as np

from scenecomp import geomath as gm
from scenecomp import synth
from scenecomp.evaluation import metrics as M
from scenecomp.evaluation import registration as RG


def scene_cloud(seed, n):
    s = synth.generate_scene(1000 + seed, 3)
    rng = np.random.default_rng(seed)
    pts = np.concatenate([gm.apply_pose(gm.sample_surface(o, n // 3 + 1, rng), p)
                          for o, p in zip(s.occupancies(), s.gt_poses)])[:n]
    pts -= pts.mean(0)
    return pts / np.linalg.norm(pts, axis=1).max(), rng


def trial(seed, n=6000):
    src, rng = scene_cloud(seed, n)
    q = gm.quat_from_axis_angle(rng.normal(size=3), np.radians(rng.uniform(0, 30)))
    t = rng.uniform(-0.2, 0.2, 3)
    dst = src @ gm.quat_to_matrix(q).T + t + rng.normal(0, 0.01, src.shape)
    dst = np.concatenate([dst, rng.uniform(dst.min(0), dst.max(0), (n // 10, 3))])  # 10% outliers
    return src, dst, q, t


def main(trials=20):
    ok = 0
    t0 = time.perf_counter()
    for seed in range(trials):
        src, dst, q, t = trial(seed)
        r = RG.register_filterreg(src, dst)
        rot = np.degrees(gm.quat_angle(r.q, q))
        sh = np.linalg.norm(r.t - t)
        ok += rot < 1.0 and sh < 1e-3
        print(f"trial {seed:3d}: rotation error {rot:.4f} deg, translation error {sh:.2e}, "
              f"{r.iterations} iterations")
    print(f"{ok}/{trials} within 1 deg and 1e-3 ({time.perf_counter() - t0:.0f}s)")

    scenes = [M.SceneGeometry.from_sample(synth.generate_scene(300 + i, 2 + i % 3)) for i in range(5)]
    bench = M.paired_benchmark(scenes, trials=max(5, trials // 2))
    for name, v in bench.items():
        print(f"{name:>9}: mean CD-S {v['mean']:.5f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
