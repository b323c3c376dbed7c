"""Move a trained x2 model to x3 by training only its deconv layer.

The conv stack is shared across scales: the x3 model reuses it untouched and
starts from a bilinear x3 deconv. Compare the fine-tune loss curve with a
from-scratch x3 run.

    python3 demos/scale_finetune.py toy_run/dafr_x2.ckpt
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dafr import model as M
from dafr import training as T
from dafr.data import synthetic_dataset

HERE = Path(__file__).parent


def main(ckpt):
    base, _ = M.load_checkpoint(ckpt)
    plan = T.load_plan(HERE / "toy_step2.ini")
    plan = replace(plan, network=replace(plan.network, S=3), max_iterations=400)

    tuned, ft = T.finetune_scale(base, 3, plan)
    res, s1 = T.train_step1(replace(T.load_plan(HERE / "toy.ini"), network=plan.network))
    scratch, s2 = T.train_step2(plan, res)

    print("epoch   fine-tune   scratch step 2")
    a, b = ft.epoch_losses(), s2.epoch_losses()
    for epoch in range(0, max(len(a), len(b)), 5):
        fa = f"{a[epoch]:.3f}" if epoch < len(a) else "-"
        fb = f"{b[epoch]:.3f}" if epoch < len(b) else "-"
        print(f"{epoch:5d}   {fa:>9}   {fb:>14}")
    print(f"(scratch also spent {len(s1)} iterations in step 1)")

    same = all(np.array_equal(x.params[k], y.params[k])
               for x, y in zip(base.stack, tuned.stack) for k in x.params)
    print("conv stack unchanged:", same)
    held = synthetic_dataset(8, 96, seed=123)
    for name, model in (("bicubic", None), ("fine-tuned", tuned), ("scratch", scratch)):
        print(f"{name:>10}: {T.mean_psnr(model, held, 3):.2f} dB at x3")


if __name__ == "__main__":
    main(sys.argv[1])
