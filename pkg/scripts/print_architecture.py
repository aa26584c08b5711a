"""Print the layer tables of G1/G2, D1/D2 and the U-Net for one base resolution.

    python scripts/print_architecture.py --resolution 512 --ngf 64 --ndf 64
"""

import argparse

from ctsynth.discriminator import DiscriminatorConfig, discriminator_layer_table
from ctsynth.generator import GeneratorConfig, generator_layer_table
from ctsynth.seg import unet_layer_table


def show(title, rows):
    print(title)
    for name, dims in rows:
        print(f"  {name:<12} {'x'.join(map(str, dims))}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolution", type=int, default=512)
    ap.add_argument("--ngf", type=int, default=64)
    ap.add_argument("--ndf", type=int, default=64)
    ap.add_argument("--unet-base", type=int, default=32)
    args = ap.parse_args()
    r = args.resolution
    show("generator", generator_layer_table(GeneratorConfig(base_resolution=r, base_channels=args.ngf)))
    dcfg = DiscriminatorConfig(base_channels=args.ndf)
    show(f"D1 ({r}x{r})", discriminator_layer_table(dcfg, r))
    show(f"D2 ({r // 2}x{r // 2})", discriminator_layer_table(dcfg, r // 2))
    show("U-Net", unet_layer_table(args.unet_base, 4, r))


if __name__ == "__main__":
    main()
