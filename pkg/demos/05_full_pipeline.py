"""Miniature end-to-end run: generate, train both stages, infer, evaluate.

Uses a deliberately small configuration so the whole walk finishes in about a
minute; the acceptance-scale configuration lives in the test suite and the
README. Expect rough quality at this size: the point is the data flow.
"""

import tempfile
import time
from pathlib import Path

from bevis.config import PipelineConfig
from bevis.pipeline import (
    format_eval_table,
    generate_dataset,
    run_eval,
    run_infer,
    train_stage_2d,
    train_stage_3d,
)

cfg = PipelineConfig(
    n_scenes=10,
    room_min=3.0,
    room_max=3.6,
    objects_min=2,
    objects_max=4,
    density=70.0,
    steps_2d=120,
    steps_3d=120,
    eval_every=60,
    seed=3,
)

root = Path(tempfile.mkdtemp(prefix="bevis_demo_"))
print("working in", root)

t0 = time.time()
generate_dataset(cfg, root / "data")
print(f"[{time.time() - t0:6.1f}s] generated {cfg.n_scenes} scenes")

r2 = train_stage_2d(cfg, root / "data", root / "run")
print(f"[{time.time() - t0:6.1f}s] 2d stage: {r2.steps_run} steps, val {r2.best_val:.3f}")

r3 = train_stage_3d(cfg, root / "data", root / "run", r2.checkpoint)
print(f"[{time.time() - t0:6.1f}s] 3d stage: {r3.steps_run} steps, val {r3.best_val:.3f}")

run_infer(cfg, root / "data", root / "pred", r2.checkpoint, r3.checkpoint, split="test", render=True)
print(f"[{time.time() - t0:6.1f}s] inference done (predictions + renders in {root / 'pred'})")

result = run_eval(cfg, root / "pred", root / "data", root / "eval")
print(format_eval_table(result))
