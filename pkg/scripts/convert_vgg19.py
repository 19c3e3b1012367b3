"""Extract VGG-19's third convolution (block2_conv1) into a WeightArchive.

IR-BRAINNET's second convolution has the same 3x3x64x128 shape as VGG-19's
block2_conv1, so its ImageNet weights can seed that layer. This script is an
offline step; the package itself never imports a deep learning framework.

Usage::

    python scripts/convert_vgg19.py keras vgg19_weights_tf_dim_ordering_tf_kernels.h5 donor.warc
    python scripts/convert_vgg19.py torch vgg19-dcbb9e9d.pth donor.warc

then ``adensemble train --import-vgg19 donor.warc``.

Keras stores kernels as (kh, kw, cin, cout), which is already this engine's
layout. PyTorch stores (cout, cin, kh, kw) and needs a transpose. Both
frameworks compute cross-correlation, so no kernel flip is required.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from adensemble.archive import WeightArchive

ENTRY = "vgg19/block2_conv1"
SHAPE = (3, 3, 64, 128)
# torchvision's vgg19().features: conv, relu, conv, relu, pool, conv <- index 5
TORCH_KEY = "features.5"


def from_torch_layout(weight, bias):
    """(cout, cin, kh, kw) -> (kh, kw, cin, cout)."""
    return np.transpose(np.asarray(weight, dtype=np.float32), (2, 3, 1, 0)), np.asarray(bias, np.float32)


def to_archive(weight, bias) -> WeightArchive:
    if weight.shape != SHAPE or bias.shape != (SHAPE[-1],):
        raise ValueError(f"expected kernel {SHAPE} and bias ({SHAPE[-1]},), "
                         f"got {weight.shape} and {bias.shape}")
    arc = WeightArchive(meta={"source": "VGG-19 block2_conv1"})
    arc.add(f"{ENTRY}/w", weight)
    arc.add(f"{ENTRY}/b", bias)
    return arc


def load_keras(path):
    import h5py  # only needed for this conversion

    with h5py.File(path, "r") as fh:
        root = fh["model_weights"] if "model_weights" in fh else fh
        group = root["block2_conv1"]
        names = []
        group.visit(names.append)
        datasets = [group[n] for n in names if isinstance(group[n], h5py.Dataset)]
        kernel = next(np.array(d) for d in datasets if d.ndim == 4)
        bias = next(np.array(d) for d in datasets if d.ndim == 1)
    return kernel.astype(np.float32), bias.astype(np.float32)


def load_torch(path):
    import torch  # only needed for this conversion

    state = torch.load(path, map_location="cpu")
    return from_torch_layout(state[f"{TORCH_KEY}.weight"].numpy(), state[f"{TORCH_KEY}.bias"].numpy())


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("format", choices=("keras", "torch"))
    p.add_argument("source")
    p.add_argument("dest")
    args = p.parse_args(argv)
    weight, bias = (load_keras if args.format == "keras" else load_torch)(args.source)
    to_archive(weight, bias).save(args.dest)
    print(f"wrote {weight.size + bias.size:,} values to {args.dest} as {ENTRY}/{{w,b}}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
