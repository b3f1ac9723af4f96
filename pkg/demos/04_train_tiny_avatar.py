"""End-to-end miniature: generate a synthetic sequence, run the two-stage
training at a small budget, evaluate on the held-out tail, and render one
frame's maps.

Takes a few minutes on a laptop; outputs land in demos/tiny_run/.
"""

from pathlib import Path

import numpy as np

from meshsplat import pipeline, tensor as T
from meshsplat.images import save_png
from meshsplat.synthetic import generate_sequence

root = Path(__file__).parent / "tiny_run"
data = root / "data"
if not (data / "manifest.json").exists():
    generate_sequence(data, seed=3, frames=8, resolution=64)
    print(f"generated 8 frames at 64x64 in {data}")

cfg = pipeline.TrainConfig(
    data_dir=str(data), out_dir=str(root / "run"),
    pseudo_iterations=300, warmup_iterations=600, iterations=400,
    holdout_tail=2, log_every=100, hierarchy_factor=3.0)
result = pipeline.train(cfg)
print(f"finished: {result['iterations_run']} iterations, "
      f"final loss {result['final_loss']:.4f}")

summary = pipeline.evaluate(result["checkpoint"], data, root / "eval")
print(f"held-out tail: PSNR {summary['psnr']:.2f} dB, SSIM {summary['ssim']:.4f}")
print(f"checkpoint {summary['ckpt_bytes'] / 1e6:.2f} MB vs "
      f"raw per-frame clouds {summary['raw_cloud_bytes'] / 1e6:.2f} MB")

# render the last frame's maps
from meshsplat import checkpoint as ckpt_io
from meshsplat.pipeline import _load_frames, forward_frame, model_from_checkpoint
from meshsplat.synthetic import load_sequence

model, _ = model_from_checkpoint(ckpt_io.load(result["checkpoint"]))
seq = load_sequence(data)
frame = _load_frames(seq, seq.frames[-1:])[0]
with T.no_grad():
    final, coarse, rout, _ = forward_frame(model, frame)
save_png(final.data, root / "final.png")
save_png(coarse.data, root / "coarse.png")
save_png(np.clip((rout.depth.data - frame.camera.near)
                 / (frame.camera.far - frame.camera.near), 0, 1), root / "depth.png")
save_png(rout.weight.data, root / "weight.png")
print(f"wrote final/coarse/depth/weight PNGs to {root}")
