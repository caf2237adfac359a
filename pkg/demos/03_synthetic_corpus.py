# coding: utf-8

# # The synthetic corpus
#
# Source patches (the pretraining set) are gaussian textures; half of them carry
# a small 2x2 motif of height delta in every channel. Target bags are built the
# same way, except that only a few patches of a positive bag carry the motif,
# and every target patch goes through a per-channel affine shift the source
# never sees. The per-patch ground truth is kept in a sidecar the training code
# never reads.

import tempfile

import numpy as np

from promptmil.synthdata import CorpusSpec, generate_corpus, read_bags

spec = CorpusSpec(num_train=8, num_val=4, num_test=4, seed=11)
bags, (src_x, src_y) = generate_corpus(spec)
print("source patches", src_x.shape, "class balance", src_y.mean())
print("positives per positive bag", spec.positives_per_bag)

# ## What the shift does
#
# Per-channel means and standard deviations of source patches against target
# patches from negative bags.

neg = np.concatenate([b.patches for b in bags["train"] if b.label == 0])
print("source mean", src_x[src_y == 0].mean(axis=(0, 2, 3)).round(3))
print("target mean", neg.mean(axis=(0, 2, 3)).round(3))
print("source std ", src_x[src_y == 0].std(axis=(0, 2, 3)).round(3))
print("target std ", neg.std(axis=(0, 2, 3)).round(3))

# ## Where the positives are
#
# The ground truth is only available from the in-memory generator output (or
# the truth/ sidecar on disk).

pos = next(b for b in bags["train"] if b.label == 1)
print(pos.bag_id, "positive patch indices", [i for i, v in enumerate(pos.instance_truth) if v])

# ## Round trip through disk

with tempfile.TemporaryDirectory() as d:
    generate_corpus(spec, d)
    back = read_bags(d)
    same = all(np.array_equal(a.patches, b.patches) for a, b in zip(bags["test"], back["test"]))
    print("bit-exact round trip:", same)
