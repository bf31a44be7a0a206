"""Reconstruct a shallow and a deep bead with the three linear baselines.

The sensitivity matrix is the linearization of the forward model around the
empty window.  Reconstructions are written to ``out/<method>.pgm``.

    python3 demos/linear_baselines.py
"""
from pathlib import Path

import numpy as np

from microect.forward import ForwardModel
from microect.linear_inverse import BASELINES, sensitivity_matrix
from microect.metrics import iou, pearson_cc
from microect.pgm import write_pgm
from microect.phantoms import disk_coverage

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

fm = ForwardModel.create()
J = sensitivity_matrix()
print(f"sensitivity matrix {J.J.shape}")

truth = np.maximum(disk_coverage((100, 200), 20.0, 60.0, 15.0),
                   disk_coverage((100, 200), 70.0, 140.0, 15.0))
write_pgm(out / "truth.pgm", truth)
c = fm(truth)
deep = (slice(55, 85), slice(125, 155))

print(f"{'method':10s} {'IoU':>6s} {'CC':>6s} {'deep IoU':>9s}")
for name, fn in BASELINES.items():
    rec = fn(c, J)
    write_pgm(out / f"{name}.pgm", rec)
    print(f"{name:10s} {iou(rec, truth):6.3f} {pearson_cc(rec, truth):6.3f} "
          f"{iou(rec[deep], truth[deep]):9.3f}")
