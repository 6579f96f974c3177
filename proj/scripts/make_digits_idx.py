#!/usr/bin/env python3
"""Regenerates data/digits-images-idx3-ubyte and data/digits-labels-idx1-ubyte.

Source: the UCI ML hand-written digits dataset (Alpaydin & Kaynak) as shipped
with scikit-learn (sklearn.datasets.load_digits): 1797 grayscale 8x8 scans
with intensities 0..16. Intensities are rescaled to 0..255 (v * 16, capped)
so the files are ordinary 256-level IDX images; the pipeline's 16-level
quantization recovers the original values exactly.
"""

import struct
import sys
from pathlib import Path

from sklearn.datasets import load_digits


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent.parent / "data"
    out_dir.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = digits.images.astype(int)  # (1797, 8, 8), values 0..16
    labels = digits.target.astype(int)

    n, h, w = images.shape
    pixel_bytes = bytes(min(255, v * 16) for v in images.reshape(-1))
    with open(out_dir / "digits-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(pixel_bytes)
    with open(out_dir / "digits-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(int(v) for v in labels))
    print(f"wrote {n} images of {h}x{w} to {out_dir}")


if __name__ == "__main__":
    main()
