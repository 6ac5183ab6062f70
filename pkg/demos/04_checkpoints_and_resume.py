"""
Checkpoints, resuming and determinism
=====================================

A run is a pure function of its config: the same config and seed give the
same metrics bit for bit, and a run stopped and resumed from a checkpoint
continues exactly where the unbroken run would be.
"""

import tempfile
from pathlib import Path

from comad.checkpoint import load_checkpoint
from comad.config import Config, dump_config
from comad.training import Trainer

cfg = Config().with_overrides({"train.batch_size": 8, "train.steps": 20, "train.seed": 5})
print("config excerpt:")
print("\n".join(dump_config(cfg).splitlines()[:6]), "\n...")

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    # One uninterrupted run.
    ref = [r.total for r in Trainer(cfg).run()]

    # The same run, stopped after 8 steps.
    first = Trainer(cfg)
    first.run(8)
    first.save(tmp / "step8.ckpt")
    ckpt = load_checkpoint(tmp / "step8.ckpt")
    size_kb = (tmp / "step8.ckpt").stat().st_size / 1024
    print(f"checkpoint: step {ckpt.step}, {len(ckpt.tensors)} tensors, {size_kb:.0f} KiB")

    # A fresh process would do exactly this.
    resumed = Trainer.from_checkpoint(tmp / "step8.ckpt", cfg)
    rest = [r.total for r in resumed.run()]

print(f"losses after resume equal the unbroken run: {rest == ref[8:]}")
print(f"first/last total loss: {ref[0]:.4f} / {ref[-1]:.4f}")

# A second unbroken run reproduces every loss exactly.
again = [r.total for r in Trainer(cfg).run()]
print(f"two runs bitwise identical: {again == ref}")
