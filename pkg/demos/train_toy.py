"""
Training a toy model
====================

Overfit five frames, then report metrics at three distance caps. Takes a couple
of minutes on one CPU core.
"""
from cafnet import SceneConfig, generate_scene
from cafnet.harness import TrainConfig, train
from cafnet.harness import format_markdown, metrics_rows
from cafnet.losses import METRIC_COLUMNS

frames = generate_scene(SceneConfig(n_frames=5), seed=0)
config = TrainConfig(epochs=300, batch_size=5, lr=1e-3, flip=False, out="demo_out/toy_run")
run = train(config, frames)

log = run.loss_log
print(f"loss {log[0]['total']:.2f} -> {log[-1]['total']:.2f} over {len(log)} steps "
      f"in {run.wall_clock:.0f}s")
print(format_markdown(METRIC_COLUMNS, metrics_rows(run.metrics, config.caps)))
