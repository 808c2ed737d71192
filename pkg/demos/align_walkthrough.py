"""Walk through global alignment on one synthetic clip.

Renders a clip whose supporting frame is the key frame shifted by a known
translation, then shows that warping the support's features with the
ground-truth sampling theta brings them back onto the key features, and
that the untrained local calibration leaves the warped features alone.

    python demos/align_walkthrough.py
"""
import numpy as np

from tempalign.alignment import ModelConfig, PoseModel, global_transform
from tempalign.synth import SynthConfig, gen_clip, pixel_affine_to_theta, translation_spec
from tempalign.tensor import Tensor, no_grad

cfg = SynthConfig(blur_choices=(1,), occluder_prob=0.0, jitter_std=0.0)
clip = gen_clip(cfg, seed=4, spec=translation_spec(6.0, -3.0, window=(1,)))
a = clip.spec.global_affine[1]
print("pixel motion key -> support:\n", np.round(a, 3))
print("key joints    ", np.round(clip.key_ann.joints[:2], 1).tolist())
print("support joints", np.round(clip.support_anns[1].joints[:2], 1).tolist())

theta = pixel_affine_to_theta(a, cfg.height, cfg.width).astype(np.float32)
print("sampling theta that undoes it:\n", np.round(theta, 4))

model = PoseModel(ModelConfig(), seed=0)
with no_grad():
    zk = model.extract_features(Tensor(clip.key[None]))
    zs = model.extract_features(Tensor(clip.supports[1][None]))
    warped = global_transform(zs, Tensor(theta[None]))
    calibrated = model.local_calibrate(warped, zk)

inner = (slice(None), slice(None), slice(3, -3), slice(3, -3))   # skip the zero-padded band


def dist(z):
    return float(np.linalg.norm((z.data - zk.data)[inner]))


print(f"feature distance to key, unaligned   {dist(zs):8.3f}")
print(f"feature distance to key, theta-warped {dist(warped):8.3f}")
print(f"untrained calibration changes warped features by "
      f"{float(np.abs(calibrated.data - warped.data).max()):.2e}")

# the regressor starts at the identity for any input pair
with no_grad():
    print("untrained GTM estimate:\n", model.estimate_affine(zk[0], zs[0]).data)
