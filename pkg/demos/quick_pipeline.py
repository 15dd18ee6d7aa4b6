# Whole pipeline in-process on a tiny configuration (about a minute on one CPU core).
# Same stages as the CLI: synth, prepare, train-landmarks, train-blender, generate, evaluate.
import json
import sys

from morphkit.pipeline import commands
from morphkit.pipeline.config import load_config

run_dir = sys.argv[1] if len(sys.argv) > 1 else "run_quick"
cfg = load_config("demos/smoke.yaml")
ctx = commands.RunContext(cfg, run_dir)

commands.cmd_synth(ctx)
listing = commands.cmd_prepare(ctx)
print(f"prepared {len(listing['pairs'])} pairs, {len(listing['failed'])} failed")

lmb = commands.cmd_train_landmarks(ctx)
print("landmark blender, last log row:", [round(v, 4) for v in lmb.history[-1]])
gib = commands.cmd_train_blender(ctx)
print("image blender, last log row:", [round(v, 4) for v in gib.history[-1]])

rows = commands.cmd_generate(ctx)
print(f"generated {len(rows)} morphs")

summary = commands.cmd_evaluate(ctx)
print(json.dumps(summary["methods"], indent=2, default=float))
