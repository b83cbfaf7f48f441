"""Anatomy of the six distillation loss terms on a tiny hand-sized batch.

Builds a two-sample batch, runs a frozen teacher and a fresh student, and
prints each loss term plus two sanity properties: a student cloned from the
teacher's outputs scores (near) zero on every distillation term, and the
analytic gradient of the total matches finite differences.
Run with: python3 demos/loss_anatomy.py
"""

import numpy as np

from srkd import (LOSS_NAMES, LossWeights, SceneSpec, Tensor, generate_scene,
                  loss_amra_channel, loss_amra_point, loss_amra_voxel,
                  loss_batch_gd, loss_kd, loss_task, make_student_from_teacher,
                  make_teacher, resample_fixed, supervoxel_features,
                  weighted_total)
from srkd.autodiff import concat_rows, finite_diff_gradient
from srkd.trainer import grid_for_clouds
from srkd.voxelize import (SamplerConfig, batch_label_histogram,
                           build_supervoxels, sample_supervoxels)

spec = SceneSpec(n_classes=4, points_per_scene=96, n_scenes=2, seed=3)
clouds = [generate_scene(spec, i) for i in range(2)]
samples = [resample_fixed(c, 64, seed=10 + i) for i, c in enumerate(clouds)]

teacher = make_teacher(spec.d_in, spec.n_classes, d_out=16, k=4, seed=1)
teacher.freeze()
student = make_student_from_teacher(teacher, seed=2)
w = LossWeights()

# Supervoxels: class-balanced regions of the cylindrical grid, shared between
# teacher and student so the affinity losses compare matched point sets.
grid = grid_for_clouds(clouds)
sampler = SamplerConfig(k=2, n_point=16, n_voxel=4)
hist = batch_label_histogram(samples, spec.n_classes)
chosen = [sample_supervoxels(build_supervoxels(s, grid, sampler, hist, seed=i),
                             sampler.k, seed=20 + i)
          for i, s in enumerate(samples)]

t_out = [teacher.forward(s) for s in samples]
s_out = [student.forward(s) for s in samples]
t_feats = [o[1].data for o in t_out]
s_feats = [o[1] for o in s_out]
s_logits = concat_rows([o[2] for o in s_out])
t_logits = np.concatenate([o[2].data for o in t_out])
labels = np.concatenate([s.cloud.labels for s in samples])
mask = np.concatenate([s.mask for s in samples])

views_s, views_t, views_c_s = [], [], []
for f_s, f_t, svs in zip(s_feats, t_feats, chosen):
    proj = student.projection.forward(f_s)
    for sv in svs:
        views_s.append(supervoxel_features(f_s, sv))
        views_t.append(supervoxel_features(Tensor(f_t), sv))
        views_c_s.append(supervoxel_features(proj, sv))

comps = {
    "l_task": loss_task(s_logits, labels, mask),
    "l_kd": loss_kd(s_logits, t_logits, w.t_logit, mask),
    "l_amra_p": loss_amra_point(views_s, views_t),
    "l_amra_v": loss_amra_voxel(views_s, views_t),
    "l_amra_c": loss_amra_channel(views_c_s, views_t),
    "l_batch_gd": loss_batch_gd(s_feats, t_feats, w.t_gd, [s.mask for s in samples]),
}
total = weighted_total(comps, w)
print("fresh student vs frozen teacher:")
for name in LOSS_NAMES:
    print(f"  {name:10s} = {comps[name].item():.6f}")
print(f"  l_total    = {total.item():.6f}")

# Property 1: a student whose features and logits equal the teacher's has
# zero distillation loss. We fake this by reusing the teacher outputs on
# both sides; only the task loss survives.
tv = [supervoxel_features(Tensor(f), sv)
      for f, svs in zip(t_feats, chosen) for sv in svs]
ident = {
    "l_kd": loss_kd(Tensor(t_logits), t_logits, w.t_logit, mask),
    "l_amra_p": loss_amra_point(tv, tv),
    "l_amra_v": loss_amra_voxel(tv, tv),
    "l_amra_c": loss_amra_channel(tv, tv),
    "l_batch_gd": loss_batch_gd([Tensor(f) for f in t_feats], t_feats,
                                w.t_gd, [s.mask for s in samples]),
}
print("\nidentity check (student outputs == teacher outputs):")
for name, t in ident.items():
    print(f"  {name:10s} = {t.item():.2e}")
    assert t.item() < 1e-10

# Property 2: backpropagated gradient of l_total w.r.t. one weight matrix
# matches central finite differences.
student.zero_grads()
total.backward()
pname, p = next(iter(student.named_params().items()))
analytic = p.grad.copy()


def f(theta):
    p.data[...] = theta
    outs = [student.forward(s) for s in samples]
    c = dict(comps)
    c["l_task"] = loss_task(concat_rows([o[2] for o in outs]), labels, mask)
    c["l_kd"] = loss_kd(concat_rows([o[2] for o in outs]), t_logits,
                        w.t_logit, mask)
    vs, vc = [], []
    for o, svs in zip(outs, chosen):
        proj = student.projection.forward(o[1])
        for sv in svs:
            vs.append(supervoxel_features(o[1], sv))
            vc.append(supervoxel_features(proj, sv))
    c["l_amra_p"] = loss_amra_point(vs, views_t)
    c["l_amra_v"] = loss_amra_voxel(vs, views_t)
    c["l_amra_c"] = loss_amra_channel(vc, views_t)
    c["l_batch_gd"] = loss_batch_gd([o[1] for o in outs], t_feats, w.t_gd,
                                    [s.mask for s in samples])
    return weighted_total(c, w).item()


orig = p.data.copy()
fd = finite_diff_gradient(f, orig.copy(), h=1e-5)
p.data[...] = orig
rel = np.max(np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic),
                                                           np.abs(fd)), 1.0))
print(f"\ngradient of l_total w.r.t. {pname}: max relative error {rel:.2e}")
assert rel < 1e-4
