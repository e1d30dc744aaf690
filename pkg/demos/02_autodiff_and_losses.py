"""The tensor core: reverse-mode gradients checked against finite differences.

Builds the pieces both networks rely on (conv, batch norm, the pair-margin
instance loss) and verifies a few gradients numerically, the same way the
test suite does at scale.
"""

import numpy as np

from bevis import autodiff as ad
from bevis.autodiff import Tensor
from bevis.net2d import PairLossConfig, instance_loss_2d

rng = np.random.default_rng(0)

# a scalar loss through conv -> bn -> relu -> pool
x = Tensor(rng.normal(size=(1, 8, 8, 2)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 3, 2, 4)) * 0.4, requires_grad=True)
b = Tensor(np.zeros(4), requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)


def forward():
    h, _, _ = ad.batchnorm_train(ad.conv3x3(x, w, b), gamma, beta)
    h = ad.maxpool2x2(ad.relu(h))
    return ad.tmean(ad.mul(h, h))


loss = forward()
loss.backward()
print(f"loss = {loss.item():.6f}")

# central finite differences on a few kernel entries
step = 1e-5
for idx in [(0, 0, 0, 0), (1, 1, 1, 2), (2, 2, 0, 3)]:
    orig = w.data[idx]
    w.data[idx] = orig + step
    hi = forward().item()
    w.data[idx] = orig - step
    lo = forward().item()
    w.data[idx] = orig
    numeric = (hi - lo) / (2 * step)
    print(f"dL/dw{idx}: analytic {w.grad[idx]: .8f}  numeric {numeric: .8f}")

# the discriminative pair loss: pull same-instance pixels together (margin
# 0.5), push different instances apart (margin 1.5)
emb = np.zeros((2, 4, 2))
emb[0, :, 0] = 0.0   # instance 0 pixels collapse
emb[1, :, 0] = 1.0   # instance 1 sits only 1.0 away: the dist hinge is active
gt = np.array([[0] * 4, [1] * 4])
cfg = PairLossConfig(delta_var=0.5, delta_dist=1.5, samples_per_instance=10)
loss, report = instance_loss_2d(Tensor(emb), gt, np.ones((2, 4), bool), cfg, seed=0)
print(f"pair loss at separation 1.0: {loss.item():.4f} (l_dist={report.l_dist:.4f})")

emb[1, :, 0] = 2.0   # beyond delta_dist: both hinges inactive
loss, _ = instance_loss_2d(Tensor(emb), gt, np.ones((2, 4), bool), cfg, seed=0)
print(f"pair loss at separation 2.0: {loss.item():.4f} (margins satisfied -> exactly 0)")
