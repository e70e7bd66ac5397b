"""IoU and JIoU of a shifted detection against a sparsely observed label over a grid of shifts.

    python3 scripts/shift_heatmap.py --output out/shift
"""
import argparse
from pathlib import Path

import numpy as np

from labelunc.atomicio import atomic_write_text
from labelunc.geometry import BoxBev, rotated_iou, unit_to_world
from labelunc.jiou import jiou_det
from labelunc.labelvb import VbConfig, infer_posterior


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-shift", type=float, default=1.5, help="m along each axis")
    ap.add_argument("--steps", type=int, default=13)
    ap.add_argument("--resolution", type=float, default=0.1)
    ap.add_argument("--output", default="out/shift")
    args = ap.parse_args()

    label = BoxBev(0.0, 20.0, 4.5, 1.8, np.pi / 2)
    s = np.linspace(-0.45, 0.45, 12)
    pts = unit_to_world(np.column_stack([np.full(12, -0.5), s]), label)  # the edge facing the sensor
    post = infer_posterior(pts, label, cfg=VbConfig(sigma_mode="fixed", sigma=0.1))
    shifts = np.linspace(-args.max_shift, args.max_shift, args.steps)
    lines = ["dx,dy,iou,jiou"]
    for dx in map(float, shifts):
        for dy in map(float, shifts):
            det = BoxBev(label.c1 + dx, label.c2 + dy, label.l, label.w, label.r)
            iou = rotated_iou(det, label)
            j = jiou_det(det, post).value
            lines.append(f"{dx!r},{dy!r},{iou!r},{j!r}")
    atomic_write_text(Path(args.output) / "shift_heatmap.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} shifts to {Path(args.output) / 'shift_heatmap.csv'}")


if __name__ == "__main__":
    main()
