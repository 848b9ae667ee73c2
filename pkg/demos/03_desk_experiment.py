"""Synthesize a dataset, train a desk-scale model, and score it.

Run: python3 demos/03_desk_experiment.py [steps] [workdir]

With the defaults (1000 steps) this takes about 15 minutes on one CPU core.
The same pipeline is available from the command line as
``stnmamba synth / train / eval / score``.
"""

import sys
from pathlib import Path

import numpy as np

from stnmamba import ModelConfig, STNMamba, TrainConfig, evaluate, train
from stnmamba.data import ClipDataset, index_dataset, synthesize_dataset
from stnmamba.scoring import frame_level_auc
from stnmamba.viz import save_normality_curve

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
work = Path(sys.argv[2] if len(sys.argv) > 2 else "desk_demo")

meta = synthesize_dataset(work / "data", seed=0)
for key, v in sorted(meta["videos"].items()):
    if "anomaly" in v:
        a = v["anomaly"]
        print("%s: %s anomaly, frames %d-%d" % (key, a["kind"], a["start"], a["end"]))

cfg = ModelConfig.desk()
model = STNMamba(cfg)
test = index_dataset(work / "data", "test")
print("untrained AUC: %.3f" % evaluate(model, test).auc)

dataset = ClipDataset(index_dataset(work / "data", "train"), cfg.frames, cfg.image_size)


def progress(row):
    if row["step"] % 100 == 0:
        print("step %5d  L_p %.4f  total %.4f" % (row["step"], row["L_p"], row["total"]))


train(model, dataset, TrainConfig.desk(steps=steps), out_dir=work / "run", callback=progress)

result = evaluate(model, test)
print("trained AUC: %.3f" % result.auc)
for v in result.videos:
    print("  video %s: AUC %.3f" % (v.name, frame_level_auc(v.S, v.labels)))
    save_normality_curve(work / ("curve_%s.png" % v.name), v.frames, v.N_s, v.labels, "video " + v.name)

# tau trades the prediction channel against the memory channel
from stnmamba.evaluate import fuse_and_auc  # noqa: E402

for tau in np.linspace(0, 1, 6):
    print("tau %.1f -> AUC %.3f" % (tau, fuse_and_auc(result.videos, tau)))
