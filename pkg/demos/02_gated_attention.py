# coding: utf-8

# # Gated attention pooling over a bag
#
# A bag is a set of patch features h_1..h_n. Each patch gets a score
# w . (tanh(V1 h) * sigmoid(V2 h)), the scores go through a softmax, and the
# bag feature is the weighted sum of the patches. A linear head turns that into
# two logits.

import numpy as np

from promptmil.layers import ParamSet
from promptmil.mil import attention_scores, classify_bag, mil_init
from promptmil.numerics import Rng

# ## The one-dimensional case by hand
#
# With L = M = 1 and every weight equal to one, a bag holding the features 0
# and 1 gives the scores tanh(0) * sigmoid(0) = 0 and tanh(1) * sigmoid(1).

ps = ParamSet()
for name in ("mil.V1", "mil.V2"):
    ps.add(name, np.ones((1, 1)), True)
ps.add("mil.w", np.ones(1), True)
print(attention_scores(np.array([[0.0], [1.0]]), ps).data)  # about [0.3643, 0.6357]

# ## Order does not matter
#
# Shuffling the patches shuffles the weights the same way and leaves the bag
# prediction unchanged.

rng = Rng(7, "demo")
mil = mil_init(feature_dim=6, rng=rng, hidden=5)
mil.entries["mil.head_w"].data = rng.gaussian(0.0, 1.0, 12).reshape(2, 6).astype(np.float32)
bag = rng.gaussian(0.0, 1.0, 10 * 6).reshape(10, 6)
perm = rng.permutation(10)

a = classify_bag(bag, mil)
b = classify_bag(bag[perm], mil)
print("probability", a.probability, b.probability)
print("weights follow the patches:", np.allclose(a.alphas.data[perm], b.alphas.data))

# ## One loud patch
#
# Scale a single patch up and watch the attention mass move onto it (or away
# from it, depending on the sign the random weights give its direction).

loud = bag.copy()
loud[3] *= 4.0
print("before", np.round(attention_scores(bag, mil).data, 3))
print("after ", np.round(attention_scores(loud, mil).data, 3))
