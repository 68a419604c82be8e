"""
Checking reverse-mode gradients against finite differences
==========================================================

Build a tiny conv -> pool -> dense network by hand, differentiate a loss
with the library's reverse-mode engine, and compare every parameter
gradient with a central finite difference.
"""
import numpy as np

from hitrank import tensor as T
from hitrank.tensor import ParamSet, Tensor

rng = np.random.default_rng(0)

# a batch of four single-channel 8x10 "spectrograms" and a target per item
x = Tensor(rng.normal(size=(4, 1, 8, 10)))
y = rng.normal(size=4)

# parameters live in an ordered ParamSet; names become checkpoint keys
ps = ParamSet([("conv.k", rng.normal(size=(2, 1, 3, 3)) * 0.3),
               ("conv.b", np.zeros(2)),
               ("fc.w", rng.normal(size=(2 * 3 * 4, 1)) * 0.3),
               ("fc.b", np.zeros(1))])


def loss():
    h = T.relu(T.conv2d_forward(x, ps["conv.k"], ps["conv.b"]))   # (4, 2, 6, 8)
    h = T.pool_max(h, (2, 2))                                     # (4, 2, 3, 4)
    h = T.reshape(h, (4, -1))
    out = T.reshape(T.dense_forward(h, ps["fc.w"], ps["fc.b"]), (-1,))
    return T.mean(T.square(T.sub(out, y)))


# one backward pass fills .grad on every parameter
T.backward(loss(), ps)

# central differences, one coordinate at a time
h = 1e-5
for name, p in ps.items():
    numeric = np.zeros_like(p.data)
    for idx in np.ndindex(p.shape):
        keep = p.data[idx]
        p.data[idx] = keep + h
        up = loss().item()
        p.data[idx] = keep - h
        down = loss().item()
        p.data[idx] = keep
        numeric[idx] = (up - down) / (2 * h)
    err = np.max(np.abs(p.grad - numeric)) / max(1e-12, np.max(np.abs(numeric)))
    print(f"{name:7s} shape {str(p.shape):14s} relative error {err:.2e}")

# parameters round-trip through a versioned binary checkpoint bit for bit
back = ParamSet.from_bytes(ps.to_bytes())
print("checkpoint round-trip exact:", all(back[k].data.tobytes() == ps[k].data.tobytes() for k in ps))
