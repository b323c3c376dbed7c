"""A freshly built DAFR model upscales like bilinear interpolation.

The deconv layer sees the LR image through a skip slice initialised with a
bilinear kernel, while its feature slices start at zero, so before any
training the network output is the bilinear upsampling of its input.
"""

import numpy as np

from dafr import imaging as I
from dafr import model as M
from dafr import training as T
from dafr.data import synthetic_dataset

hr = synthetic_dataset(1, 96, seed=5)[0]
hr, lr = T.degrade(hr, 2)
net = M.build_dafr(M.NetworkConfig(), seed=0)
out = T.super_resolve(net, lr)

# scalar bilinear reference: out(y) = sum of lr(i) * tent((y + 0.5) / S - 0.5 - i)
S = 2
grid = (np.arange(lr.height * S) + 0.5) / S - 0.5
tent = np.maximum(0, 1 - np.abs(grid[:, None] - np.arange(lr.height)[None]))
ref = tent @ lr.data @ tent.T

b = S + 4
diff = np.abs(out.data - ref)[b:-b, b:-b]
print(f"max interior |model - bilinear| = {diff.max():.2e} levels")
print(f"PSNR bilinear model {I.psnr(out.data, hr.data, S):.2f} dB, "
      f"bicubic {I.psnr(I.bicubic_resize(lr, S).data, hr.data, S):.2f} dB")
