#!/usr/bin/env python3
"""Writes a small segmentation feature set in the HBFS layout using only the
standard library, independently of the C++ writer."""

import random
import struct
import sys

PATCH = 16
IGNORE = 0xFFFF


def write(path, images=4, grid=2, dim=8, classes=3, seed=7):
    rng = random.Random(seed)
    out = bytearray()
    out += b"HBFS0001"
    out += struct.pack("<I", 1)
    out += struct.pack("<B", 0)
    out += struct.pack("<IIII", dim, classes, 1, images)
    for image_id in range(images):
        # One class per patch row; bilinear upsampling keeps stripes exact.
        row_class = [rng.randrange(classes) for _ in range(grid)]
        patch_class = [[row_class[r]] * grid for r in range(grid)]
        out += struct.pack("<QII", 1000 + image_id, grid, grid)
        for r in range(grid):
            for c in range(grid):
                k = patch_class[r][c]
                row = [(1.0 if d == k else 0.0) + rng.gauss(0.0, 0.05) for d in range(dim)]
                out += struct.pack("<%df" % dim, *row)
        side = grid * PATCH
        labels = []
        for y in range(side):
            for x in range(side):
                if image_id == 0 and y < 3 and x < 3:
                    labels.append(IGNORE)
                else:
                    labels.append(patch_class[y // PATCH][x // PATCH])
        out += struct.pack("<%dH" % len(labels), *labels)
    with open(path, "wb") as f:
        f.write(out)


if __name__ == "__main__":
    write(sys.argv[1])
