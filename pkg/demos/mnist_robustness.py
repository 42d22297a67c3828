"""
Standard versus Min-Max LeNet on MNIST
======================================

Trains (or loads) a standard and a Min-Max LeNet, then compares clean and
attacked accuracy, fuzziness of the first conv layer and the share of
near-zero conv weights. Training takes a few minutes per model on a CPU.

    python demos/mnist_robustness.py                      # train both
    python demos/mnist_robustness.py std.json mm.json     # reuse checkpoints
"""

import sys

import numpy as np

from minmax_lenet.analysis import analyze_params
from minmax_lenet.attacks import default_attack_config, evaluate_robustness
from minmax_lenet.data import MNIST_NORM, load_mnist, normalize
from minmax_lenet.model import load_checkpoint, save_checkpoint
from minmax_lenet.training import TrainConfig, train

train_set = normalize(load_mnist("train"), MNIST_NORM)
test_set = normalize(load_mnist("test"), MNIST_NORM)

if len(sys.argv) == 3:
    models = {"std": load_checkpoint(sys.argv[1]), "minmax": load_checkpoint(sys.argv[2])}
else:
    models = {}
    for tag, mode in (("std", "standard"), ("minmax", "minmax")):
        params, log = train(TrainConfig.defaults("mnist", mode), train_set, test_set)
        save_checkpoint(params, f"{tag}.json")
        print(f"{tag}: trained in {log.wall_time:.0f}s")
        models[tag] = params

# a 2000-image subset keeps the attacks quick; drop the subset for full numbers
sub = test_set.subset(np.arange(2000))
cfgs = [default_attack_config(f, "mnist", 0.3) for f in ("FGSM", "PGD", "MIM", "BIM_L2", "BIM_Linf")]
reports = {tag: evaluate_robustness(p, sub, cfgs, tag) for tag, p in models.items()}

print(f"{'attack':10s} " + " ".join(f"{t:>8s}" for t in models))
for i, row in enumerate(reports["std"].rows):
    print(f"{row.attack:10s} " + " ".join(f"{reports[t].rows[i].accuracy:8.4f}" for t in models))

for tag, p in models.items():
    r = analyze_params(p, tag)
    print(f"{tag}: fuzziness {r.fuzziness:.4f}, |w|<1e-2 {r.near_zero['0.01']:.3f}, penalty value {r.m_value:.3f}")
