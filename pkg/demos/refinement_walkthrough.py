"""
Refining a noisy hand trajectory
================================

Synthesize a small dataset, train a denoiser for a few epochs, refine a
held-out observation and score it. Everything goes through the same
command line entry point a shell user would call.
"""

import json
import tempfile
from pathlib import Path

from physrefine.cli import main

work = Path(tempfile.mkdtemp(prefix="physrefine-demo-"))
print("working in", work)

###############################################################################
# A training set and a separate held-out set. Each sequence stores the
# ground truth, the corrupted observation and the ground-truth pseudo-force.

main(["synth", "--out", str(work / "train"), "--count", "64", "--seed", "0"])
main(["synth", "--out", str(work / "test"), "--count", "8", "--seed", "1"])

###############################################################################
# Train. The run config only shortens training; everything else uses the
# defaults. The loss history lands in loss.csv next to the checkpoint.

config = work / "run.json"
config.write_text(json.dumps({"train": {"epochs": 4}}))
main(["train", "--config", str(config), "--data", str(work / "train"), "--out", str(work / "model")])
print((work / "model" / "loss.csv").read_text())

###############################################################################
# Refine every held-out observation, then score the refined and the raw
# observations against ground truth.

main(["refine", "--checkpoint", str(work / "model" / "checkpoint.json"),
      "--input", str(work / "test"), "--out", str(work / "refined")])
main(["eval", "--refined", str(work / "refined"), "--gt", str(work / "test"), "--out", str(work / "scores")])

raw = work / "raw"
raw.mkdir()
for entry in json.loads((work / "test" / "manifest.json").read_text())["sequences"]:
    name = entry["obs"].replace("_obs.json", "")
    (raw / f"{name}_refined.json").write_bytes((work / "test" / entry["obs"]).read_bytes())
main(["eval", "--refined", str(raw), "--gt", str(work / "test"), "--out", str(work / "raw_scores")])

refined = json.loads((work / "scores" / "metrics.json").read_text())
observed = json.loads((work / "raw_scores" / "metrics.json").read_text())
for key in refined:
    print(f"{key:16s} observed {observed[key]:9.3f}   refined {refined[key]:9.3f}")
