# coding: utf-8

# # Reverse-mode tape and gradient checking
#
# Every differentiable op in `promptmil` records its output on a `Tape` together
# with a closure that maps the output gradient to input gradients. Calling
# `backward` walks the tape in reverse. This script builds a tiny graph by hand,
# compares the taped gradient with central differences, and shows what a wrong
# backward rule looks like to the checker.

import numpy as np

from promptmil.layers import ParamSet, ce_loss, linear, sigmoid
from promptmil.numerics import Tape, Tensor, backward, grad_check, record, tsum

# ## A two-layer classifier on one example
#
# Parameters live in a `ParamSet`: named arrays flagged trainable or frozen.

rng = np.random.default_rng(0)
params = ParamSet()
params.add("w1", rng.normal(size=(4, 3)), True)
params.add("w2", rng.normal(size=(2, 4)), True)
x = rng.normal(size=3)


def loss_fn(t):
    return ce_loss(linear(sigmoid(linear(Tensor(x), t["w1"])), t["w2"]), 1)


tape = Tape()
t = params.tensors(tape)
loss = loss_fn(t)
backward(tape, loss)
print("loss", loss.data)
print("d loss / d w2\n", t["w2"].grad)

# ## Central differences as the oracle
#
# `grad_check` promotes every entry to float64, re-runs the function at
# theta +- eps for a sample of coordinates and reports the worst relative error
# |a - n| / max(|a|, |n|, 1e-8).

print("max relative error", grad_check(loss_fn, params, eps=1e-4))

# ## A deliberately wrong backward rule
#
# Squaring with a VJP that forgets the factor 2 is caught immediately.


def bad_square(x):
    return record(x.data ** 2, (x,), lambda g: (g * x.data,))


sq = ParamSet()
sq.add("x", np.array([1.0, -2.0, 0.5]), True)
print("wrong rule, relative error", grad_check(lambda t: tsum(bad_square(t["x"])), sq))
