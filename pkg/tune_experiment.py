"""Scratch harness for calibrating the toy adaptation experiment.

Not part of the package: runs the full pipeline at a chosen scale and
prints stage timings plus the ablation margins that the acceptance
ordering needs.
"""

import json
import shutil
import sys
import time
from pathlib import Path

from segadapt import pipeline
from segadapt.nnet import StageSchedule
from segadapt.pipeline import PipelineConfig


def run(tag, cfg, variants=("source_only", "se", "tgcfda", "tgcfda_se")):
    root = Path(f"/tmp/tune/{tag}")
    if root.exists():
        shutil.rmtree(root)
    cfg.out_dir = str(root)
    times = {}
    t0 = time.time()
    pipeline.cmd_generate_data(cfg)
    times["data"] = time.time() - t0
    t0 = time.time()
    pipeline.cmd_pretrain_fseg(cfg)
    times["fseg"] = time.time() - t0
    t0 = time.time()
    pipeline.cmd_train_aug(cfg)
    times["gan"] = time.time() - t0
    results = {}
    for v in variants:
        t0 = time.time()
        out = pipeline.cmd_train(cfg, v)
        times[v] = time.time() - t0
        results[v] = out
        hist = out["history"]
        tail = [(round(100 * r["student_miou"], 1), round(100 * r["teacher_miou"], 1))
                for r in hist[-4:]]
        print(f"  {v:11s} mIoU={100 * out['miou']:5.1f}  last(stu,tea)={tail}  "
              f"[{times[v]:.0f}s]")
    aug_log = list(json.loads(Path(root / "reports" / "ablation.json").read_text())["rows"])
    print("  times:", {k: round(v) for k, v in times.items()},
          "total", round(sum(times.values())), "s")
    m = {r["variant"]: 100 * r["miou"] for r in aug_log}
    if len(m) == 4:
        print(f"  margins: tgcfda_se-tgcfda={m['tgcfda_se']-m['tgcfda']:+.1f}  "
              f"tgcfda_se-se={m['tgcfda_se']-m['se']:+.1f}  "
              f"se-src={m['se']-m['source_only']:+.1f}  "
              f"tgcfda-src={m['tgcfda']-m['source_only']:+.1f}  "
              f"tgcfda_se-src={m['tgcfda_se']-m['source_only']:+.1f}")
    return results


if __name__ == "__main__":
    scale = sys.argv[1] if len(sys.argv) > 1 else "half"
    seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
    cfg = PipelineConfig(seed=seed)
    if scale == "half":
        cfg.counts = (200, 200, 50)
        cfg.pretrain = StageSchedule(steps=300, batch_size=8, lr=1e-3)
        cfg.augment = StageSchedule(steps=400, batch_size=4, lr=2e-4)
        cfg.adapt = StageSchedule(steps=400, batch_size=8, lr=1e-3)
    print(f"== scale={scale} seed={seed} shift={cfg.scene.shift_params}")
    run(f"{scale}_s{seed}", cfg)
