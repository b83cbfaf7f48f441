"""End-to-end distillation on a desk-sized benchmark.

Trains a small teacher, distills a half-width student with the full SRKD
objective, and compares against a plain cross-entropy baseline. Everything
is scaled down (10 scenes, 512 points) so the whole script runs in seconds
on one CPU core.
Run with: python3 demos/train_tiny.py
"""

from dataclasses import replace

from srkd import (Dataset, LossWeights, SceneSpec, TrainConfig, evaluate,
                  generate_scene, train_distill, train_teacher)
from srkd.voxelize import SamplerConfig

spec = SceneSpec(n_scenes=10, points_per_scene=512, seed=0)
clouds = [generate_scene(spec, i) for i in range(10)]
data = Dataset(train=tuple(clouds[:8]), val=tuple(clouds[8:]))

cfg = TrainConfig(epochs=20, batch_size=4, n_fixed=256, teacher_epochs=60,
                  teacher_d_out=32, eval_every=10, seed=0,
                  sampler=SamplerConfig(k=2, n_point=32, n_voxel=8))

teacher, _ = train_teacher(cfg, data)
tm = evaluate(teacher, data.val, cfg.n_fixed)
print(f"teacher   val mIoU {tm.miou:.4f}  mAcc {tm.macc:.4f}")

plain_cfg = replace(cfg, weights=LossWeights.zeros())
plain, _ = train_distill(plain_cfg, teacher, data)
pm = evaluate(plain, data.val, cfg.n_fixed)
print(f"baseline  val mIoU {pm.miou:.4f}  mAcc {pm.macc:.4f}")

student, log = train_distill(cfg, teacher, data)
sm = evaluate(student, data.val, cfg.n_fixed)
print(f"distilled val mIoU {sm.miou:.4f}  mAcc {sm.macc:.4f}")

print("\nloss trajectory (first step of every fourth epoch):")
seen = set()
steps = []
for r in log:
    if "l_total" in r and r["epoch"] % 4 == 0 and r["epoch"] not in seen:
        seen.add(r["epoch"])
        steps.append(r)
for r in steps:
    print(f"  epoch {r['epoch']:2d}  l_task {r['l_task']:.4f}  "
          f"l_kd {r['l_kd']:.4f}  l_total {r['l_total']:.4f}  lr {r['lr']:.5f}")
