"""Short side-by-side training of the model variants.

Each variant trains on the same small synthetic set with heavily blurred
key frames; the temporal variants can borrow evidence from the sharp
supporting frames. Numbers from a run this short are noisy, so treat the
printout as a smoke test of the pipeline. The three-seed ablation is
``tempalign ablate``.

    python demos/variant_compare.py [epochs]
"""
import sys
from dataclasses import replace

from tempalign.synth import gen_dataset
from tempalign.train import VARIANTS, TrainConfig, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
base = replace(TrainConfig(), epochs=epochs, n_clips=120)
data = gen_dataset(base.synth, base.n_clips, base.data_seed)
print(f"{len(data.train_idx)} train / {len(data.val_idx)} val clips, blur widths {base.synth.blur_choices}")

for variant in VARIANTS:
    res = train(replace(base, variant=variant), data)
    print(f"{variant:8s} val PCK@0.1 per epoch {[round(v, 3) for v in res.history]}  best {res.best_val_pck:.3f}")
