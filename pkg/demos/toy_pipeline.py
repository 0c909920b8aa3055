"""
A toy run of the whole pipeline
===============================

Synthesizes a small 8 kHz dataset, trains the classifier and separator for a
few epochs through the command line entry point, evaluates against the
mixture-as-estimate baseline and writes the report. Takes about a minute.
Pass a directory as the first argument to keep the outputs.
"""

import json
import sys
import tempfile
from pathlib import Path

from sssle import cli

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="sssle-demo-"))
work.mkdir(parents=True, exist_ok=True)
(work / "cfg.json").write_text(json.dumps({
    "scene": {"duration_s": 1.0, "sample_rate": 8000},
    "train": {"max_epochs": 5, "lr": 1e-3},
    "model": {"separator": {"hidden": [64]}, "classifier": {"hidden": [32]}},
}))


def run(cmd, *args, config=True):
    argv = ["--workdir", str(work), cmd] + (["--config", "cfg.json"] if config else []) + list(args)
    print("$ sssle", " ".join(argv[2:]))
    code = cli.main(argv)
    assert code == 0, code


# %%
# Data: the classifier only ever sees background-free clips, so the
# training split carries both kinds and the loader filters.
for split, n in (("train", 60), ("valid", 20), ("test", 30)):
    run("synth", "--out", split, "--count", str(n), "--split", split, "--levels", "none,-50,-20")

# %%
# Models. Margins are estimated from the training stems.
run("train-classifier", "--data", "train/manifest.jsonl", "--val", "valid/manifest.jsonl", "--out", "clf")
run("train-separator", "--data", "train/manifest.jsonl", "--val", "valid/manifest.jsonl",
    "--classifier", "clf/model.json", "--out", "sep")
print("margins:", json.loads((work / "sep" / "train_log.json").read_text())["epsilon"])

# %%
# Evaluation and report.
run("eval", "--data", "test/manifest.jsonl", "--separator", "sep/model.json", "--out", "eval")
run("eval", "--data", "test/manifest.jsonl", "--baseline-mixture", "--out", "eval-mix")
run("report", "--results", "eval/records.jsonl", "eval-mix/records.jsonl",
    "--labels", "separator", "mixture", "--out", "report", config=False)
print("report written to", work / "report")
