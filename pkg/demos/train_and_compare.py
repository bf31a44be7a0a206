"""Train the reconstruction network on a small synthetic set and compare it
with Tikhonov regularization on held-out samples, then stitch ten test
reconstructions into one 2 mm wide section.

Sizes are kept small so the script finishes in a few minutes on one core.
At this size Tikhonov is still ahead on shallow beads; COUNT and EPOCHS
control the budget.

    python3 demos/train_and_compare.py
"""
import logging
from pathlib import Path

import numpy as np

from microect.linear_inverse import sensitivity_matrix, tikhonov_iterative
from microect.metrics import evaluate, stitch
from microect.network import TrainConfig, predict, save_model, train
from microect.pgm import write_pgm
from microect.phantoms import PhantomSpec, build_dataset, split

COUNT, EPOCHS = 300, 10

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# shallow beads only, where the array still sees them above the noise
spec = PhantomSpec(center_depth_um=(10.0, 40.0))
ds = build_dataset(COUNT, spec, seed=1, progress=lambda k, n: k % 50 or print(f"simulated {k}/{n}"))
train_set, val_set, test_set = split(ds, seed=0)

model = train(train_set, val_set, train_config=TrainConfig(epochs=EPOCHS, seed=0))
save_model(model, out / "demo.ectm")
print("learned loss weights:", np.round(model.loss_weights, 3))

J = sensitivity_matrix()
net = evaluate(lambda c: predict(model, c), test_set, "network")
tik = evaluate(lambda c: tikhonov_iterative(c, J), test_set, "tikhonov")
for rep in (net, tik):
    print(rep.predictor.ljust(9), " ".join(f"{k}={v:.3f}" for k, v in rep.means.items()))

windows = [predict(model, test_set.capacitances[k % len(test_set)]) for k in range(10)]
write_pgm(out / "stitched.pgm", stitch(windows))
write_pgm(out / "stitched_truth.pgm", stitch([test_set.images[k % len(test_set)] for k in range(10)]))
print("wrote", out / "stitched.pgm")
