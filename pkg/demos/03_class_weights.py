"""
Class weight normalisation
==========================

Most of the 128 predictions per image are background, so an unweighted
prediction discriminator mostly learns what background looks like. Class
weight normalisation rescales every prediction by the inverse share of its
argmax class.
"""

import numpy as np

from predalign import alignkit as ak
from predalign.numkernel import Tensor

rng = np.random.default_rng(0)

# 90 background-looking and 10 vehicle-looking confidence rows
conf = np.r_[rng.dirichlet((8, 1), size=90), rng.dirichlet((1, 8), size=10)]

for a in [(1, 1), (3, 1)]:
    cw = ak.class_weight_normalization(conf, a)
    print(f"a={a}: counts {cw.counts}, class weights {np.round(cw.class_weights, 4)}, "
          f"total weight {cw.weights.sum():.1f}")

# the weights only rescale log terms, so weighting by ones changes nothing
src = Tensor(rng.normal(size=(100, 6)))
tgt = Tensor(np.c_[rng.normal(size=(100, 4)), conf])
d_p = ak.PredictionDiscriminator(seed=1, dtype=np.float64)
plain = ak.prediction_alignment_losses(src, tgt, d_p)
ones = ak.weighted_alignment_losses(src, tgt, d_p, np.ones(100), np.ones(100))
print("unweighted", [round(v.item(), 6) for v in plain], "unit weights", [round(v.item(), 6) for v in ones])

# detector-side loss with a=(3,1): each vehicle row outweighs a background row about 3x
w = ak.class_weight_normalization(conf, (3, 1)).weights
_, wl_det = ak.weighted_alignment_losses(src, tgt, d_p, w)
print("weighted detector-side loss %.4f vs unweighted %.4f" % (wl_det.item(), plain[1].item()))
