"""Supervised accuracy of the perception network on each glyph family.

Gives the ceiling for the easy family and the difficulty of the hard one.

    python scripts/glyph_calibration.py --per-class 200
"""
import argparse

from abl.neural import TrainConfig
from abl.perception import GlyphFamilySpec, PerceptionModel, labeled_glyphs, perception_accuracy, retrain


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    for family in ("easy", "hard"):
        spec = GlyphFamilySpec(family)
        X, y = labeled_glyphs(spec, a.per_class, seed=a.seed + 1)
        Xt, yt = labeled_glyphs(spec, 100, seed=a.seed + 2)
        model = retrain(PerceptionModel.fresh(a.seed), list(zip(X, y)),
                        TrainConfig(learning_rate=0.05, epochs=a.epochs, minibatch=16, seed=a.seed))
        print(f"{family}: held-out accuracy {perception_accuracy(model, Xt, yt):.3f}")


if __name__ == "__main__":
    main()
