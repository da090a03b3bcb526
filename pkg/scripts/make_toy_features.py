#!/usr/bin/env python3
"""Render one synthetic sample, run the frozen toy encoder, and write
the feature maps as an .apfe file (useful for exercising `inspect` and
as a format reference for external exporters)."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptseg.config import load_config
from promptseg.encoder import FrozenEncoder, level_checksums, save_features
from promptseg.experiment import train_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=None)
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", default="runs/features")
    args = p.parse_args()

    cfg = load_config(args.config)
    dataset = train_dataset(cfg)
    sample = dataset.samples[args.class_id][args.index]
    encoder = FrozenEncoder(cfg.encoder)
    feats = encoder.extract(sample.image)

    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{sample.uid}.apfe")
    save_features(path, sample.uid, feats)
    print(f"wrote {path}")
    for i, (f, ck) in enumerate(zip(feats.levels, level_checksums(feats)), start=1):
        c, h, w = f.shape
        print(f"level {i}: {c}x{h}x{w}  sha256 {ck}")


if __name__ == "__main__":
    main()
