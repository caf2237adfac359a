# coding: utf-8

# # The command line, end to end
#
# Each pipeline stage is a subcommand that reads and writes files, so stages
# can be rerun or swapped independently. This script drives `promptmil` in a
# scratch directory with a cut-down corpus and prints the final report.

import os
import subprocess
import sys
import tempfile


def promptmil(*args):
    print("$ promptmil", " ".join(args), flush=True)
    subprocess.run([sys.executable, "-m", "promptmil", *args], check=True)


work = tempfile.mkdtemp(prefix="promptmil-demo-")
os.chdir(work)
with open("spec.cfg", "w") as fh:
    fh.write("num_train = 8\nnum_val = 6\nnum_test = 8\npatches_per_bag = 32\nrho = 0.125\n"
             "num_source = 128\ndelta = 0.5\nsigma = 0.5\n")
with open("exp.cfg", "w") as fh:
    fh.write("epochs = 5\npretrain_epochs = 5\nmil_hidden = 16\nK = 8\n")

# ## Data, backbone, features

promptmil("gen-data", "--spec", "spec.cfg", "--seed", "1", "--out", "corpus")
promptmil("pretrain-backbone", "--corpus", "corpus", "--config", "exp.cfg", "--seed", "1", "--out", "backbone.ckpt")
promptmil("extract", "--corpus", "corpus", "--backbone", "backbone.ckpt", "--out", "feats")

# ## Stage I and II
#
# The selection manifest records which stage-I checkpoint produced the scores,
# so stage III can pick it up without repeating the path.

promptmil("train-mil", "--features", "feats", "--config", "exp.cfg", "--seed", "1", "--out", "mil.ckpt")
promptmil("select", "--features", "feats", "--mil", "mil.ckpt", "--k", "8", "--out", "selection.json")

# ## Stage III, evaluation and report

promptmil("prompt-tune", "--corpus", "corpus", "--backbone", "backbone.ckpt", "--manifest", "selection.json",
          "--config", "exp.cfg", "--seed", "1", "--out", "rps_pt.ckpt")
promptmil("finetune", "--corpus", "corpus", "--backbone", "backbone.ckpt", "--manifest", "selection.json",
          "--config", "exp.cfg", "--seed", "1", "--out", "rps_ft.ckpt")
for ckpt in ("mil.ckpt", "rps_ft.ckpt", "rps_pt.ckpt"):
    for split in ("val", "test"):
        promptmil("eval", "--checkpoint", ckpt, "--corpus", "corpus", "--split", split, "--csv", "metrics.csv")
promptmil("report", "--csv", "metrics.csv")
print("artifacts in", work)
