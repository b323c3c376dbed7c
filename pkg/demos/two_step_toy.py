"""Two-step training on the synthetic toy set, start to finish.

Step 1 learns the residual between bicubic interpolation and the HR image.
Step 2 copies that network's conv stack into a DAFR model, which then
learns to upscale from the LR image directly. Takes about three minutes.

    python3 demos/two_step_toy.py [out_dir]
"""

import sys
from pathlib import Path

from dafr import model as M
from dafr import training as T
from dafr.data import synthetic_dataset

HERE = Path(__file__).parent


def main(out):
    out.mkdir(parents=True, exist_ok=True)
    step1 = T.load_plan(HERE / "toy.ini")
    step2 = T.load_plan(HERE / "toy_step2.ini")

    res, r1 = T.train_step1(step1)
    e1 = r1.epoch_losses()
    print(f"step 1: {len(r1)} iterations, epoch loss {e1[0]:.3f} -> {e1[-1]:.3f}")

    net, r2 = T.train_step2(step2, res)
    e2 = r2.epoch_losses()
    print(f"step 2: {len(r2)} iterations, epoch loss {e2[0]:.3f} -> {e2[-1]:.3f}")

    M.save_checkpoint(res, out / "residual.ckpt", seed=step1.seed, step=len(r1))
    M.save_checkpoint(net, out / "dafr_x2.ckpt", seed=step2.seed, step=len(r2))
    r1.write_csv(out / "step1.csv")
    r2.write_csv(out / "step2.csv")

    # a held-out set drawn with another seed
    held = synthetic_dataset(8, 96, seed=123)
    for name, model in (("bicubic", None), ("residual net", res), ("dafr", net)):
        print(f"{name:>12}: {T.mean_psnr(model, held, 2):.2f} dB")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "toy_run"))
