"""FBP PSNR on the Shepp-Logan phantom versus the number of angles."""

import argparse

from cglo.data import shepp_logan
from cglo.metrics import psnr
from cglo.tomo import Geometry, fbp, radon_forward, uniform_angles


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--edge-sigma", type=float, default=0.5)
    ap.add_argument("--filter", default="ram-lak", choices=["ram-lak", "hann"])
    ap.add_argument("--angles", type=int, nargs="+", default=[9, 23, 50, 100, 180])
    a = ap.parse_args()
    x = shepp_logan(a.size, edge_sigma=a.edge_sigma)
    g = Geometry.for_size(a.size)
    print("n_angles,psnr")
    for n in a.angles:
        ang = uniform_angles(n)
        print(f"{n},{psnr(fbp(radon_forward(x, g, ang), g, ang, a.size, a.filter), x):.2f}")


if __name__ == "__main__":
    main()
