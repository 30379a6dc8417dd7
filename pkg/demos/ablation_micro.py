"""
Ablation grid at micro scale
============================

Train every variant for a few epochs on sixteen frames. At this size the numbers
say little about which variant is best; the point is that the whole grid runs.
"""
from cafnet import SceneConfig, generate_dataset
from cafnet.harness import TrainConfig
from cafnet.harness import ABLATION_COLUMNS, ablate, format_markdown

frames = generate_dataset(SceneConfig(n_frames=4), seed=1, n_sequences=4)
rows = ablate(TrainConfig(epochs=5, batch_size=4, lr=1e-3), "demo_out/ablation", frames)
print(format_markdown(ABLATION_COLUMNS, rows))
