"""A label that is one of two boxes with equal probability, scored against the small box.

The normalized density gives JIoU 0.5; reading the membership field as a
density spreads mass by area and gives about 1 / (1 + 9).

    python3 scripts/two_box_demo.py --output out/two_box
"""
import argparse
from pathlib import Path

from labelunc.geometry import BoxBev
from labelunc.jiou import jiou, prob_jaccard
from labelunc.spatialdist import DiscreteSampler, GridSpec, spatial_pdq, spatial_pg_discrete, uniform_box_grid, write_pgm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resolution", type=float, default=0.05)
    ap.add_argument("--draws", type=int, default=4000)
    ap.add_argument("--output", default="out/two_box")
    args = ap.parse_args()

    small, big = BoxBev(-3, 0, 1, 1, 0), BoxBev(2, 0, 3, 3, 0)
    spec = GridSpec.covering(-4, -2, 4, 2, args.resolution)
    pred = uniform_box_grid(small, spec)
    pg = spatial_pg_discrete([small, big], [0.5, 0.5], spec)
    pdq = spatial_pdq(DiscreteSampler([small, big], [0.5, 0.5]), spec, draws=args.draws)
    out = Path(args.output)
    for name, g in (("prediction", pred), ("pg", pg), ("pdq", pdq)):
        write_pgm(g, out / f"{name}.pgm")
    print(f"JIoU with normalized density: {jiou(pred, pg).value:.4f}")
    print(f"JIoU with membership field:   {prob_jaccard(pred.values, pdq.values):.4f}")


if __name__ == "__main__":
    main()
