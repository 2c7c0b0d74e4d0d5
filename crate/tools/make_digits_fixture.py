"""Write the bundled scikit-learn 8x8 digits as 16x16 IDX files.

Used as the small handwritten-digit corpus for the integration and
acceptance tests. Pixels are bilinearly upsampled and rescaled to 0..255.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data")
out.mkdir(parents=True, exist_ok=True)

digits = load_digits()
imgs = digits.images.astype(np.float64) / 16.0
up = np.stack([zoom(im, 2, order=1) for im in imgs])
up = np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)
labels = digits.target.astype(np.uint8)

n, h, w = up.shape
with open(out / "digits16-images.idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 0x00000803, n, h, w))
    f.write(up.tobytes())
with open(out / "digits16-labels.idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(labels.tobytes())
print(n, h, w)
