#!/usr/bin/env python3
"""Layer-by-layer parameter count of the segmentation network.

Each conv-BN-ReLU block holds an out*in*k*k weight, an out bias and BN
scale/shift (2*out). The classifier is a 1x1 conv with bias.

usage: param_count.py [in_channels classes kernel backbone_widths head_widths]
       widths are comma-separated, e.g. "16,32,64".
"""
import sys


def count(in_channels, classes, kernel, backbone, head):
    total = 0
    c = in_channels
    for width in backbone + head:
        total += width * c * kernel * kernel + width + 2 * width
        c = width
    total += classes * c + classes
    return total


def main(argv):
    if len(argv) == 1:
        print(count(3, 14, 3, [16, 32, 64], [32]))
        return
    in_channels, classes, kernel = (int(a) for a in argv[1:4])
    backbone = [int(w) for w in argv[4].split(",")]
    head = [int(w) for w in argv[5].split(",")] if len(argv) > 5 and argv[5] else []
    print(count(in_channels, classes, kernel, backbone, head))


if __name__ == "__main__":
    main(sys.argv)
