"""A tour of the tensor engine.

Every layer is a pair of plain functions: ``layer(x, ...) -> (y, cache)`` and
``layer_backward(cache, dy) -> grads``. This script checks a convolution
against a direct loop, pushes a small batch through conv, pool, dense and
softmax, and then lets ``gradcheck`` compare each backward pass with central
differences.
"""
import numpy as np

from adensemble import tensor as T

rng = np.random.default_rng(0)

# 1. The im2col convolution is the same sum a loop would compute.
x = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
w = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
b = rng.standard_normal(4).astype(np.float32)
y, _ = T.conv2d(x, w, b)

xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
i, j, o = 2, 3, 1
by_hand = (xp[0, i:i + 3, j:j + 3, :] * w[..., o]).sum() + b[o]
print(f"conv2d output at ({i},{j},{o}): engine {y[0, i, j, o]:.6f}, loop {by_hand:.6f}")

# 2. A miniature forward pass: conv -> relu -> maxpool -> flatten -> dense -> softmax.
batch = rng.random((3, 8, 8, 2)).astype(np.float32)
h, _ = T.conv2d(batch, w, b)
h, _ = T.relu(h)
h, _ = T.pool2d(h, "max")
print("after pooling:", h.shape)
h, _ = T.flatten(h)
wd = rng.standard_normal((h.shape[1], 4)).astype(np.float32) * 0.1
scores, _ = T.dense(h, wd, np.zeros(4, np.float32))
probs = T.softmax(scores)
onehot = np.eye(4, dtype=np.float32)[[0, 2, 3]]
loss, dscores = T.cross_entropy(probs, onehot)
print(f"probabilities sum to {probs.sum(axis=1)}, loss {loss:.4f}")
print("fused softmax/cross-entropy gradient, first row:", np.round(dscores[0], 4))

# 3. Gradient checks. gradcheck works in float64 so the finite differences
# are not swamped by float32 round-off.
checks = {
    "conv2d": (T.conv2d, [rng.standard_normal((2, 4, 4, 2)), rng.standard_normal((3, 3, 2, 3)),
                          rng.standard_normal(3)], T.conv2d_backward),
    "maxpool": (lambda a: T.pool2d(a, "max"), [rng.standard_normal((2, 4, 4, 3))], T.pool2d_backward),
    "avgpool": (lambda a: T.pool2d(a, "avg"), [rng.standard_normal((2, 4, 4, 3))], T.pool2d_backward),
    "dense": (T.dense, [rng.standard_normal((3, 5)), rng.standard_normal((5, 2)),
                        rng.standard_normal(2)], T.dense_backward),
}
for name, (fwd, inputs, bwd) in checks.items():
    err = T.gradcheck(fwd, inputs, bwd, seed=1)
    print(f"gradcheck {name:8s} max relative error {err:.2e}")
