"""Pretrained vs freshly initialized cGLO across angle counts.

Pretrains a decoder on synthetic phantom scans (or loads one), reconstructs
held-out scans with both decoders and prints median PSNR per angle count.
The defaults reproduce the setting used by the acceptance suite.
"""

import argparse
import time

import numpy as np

from cglo.data import generate_scan
from cglo.decoder import DecoderSpec, load_checkpoint, save_checkpoint
from cglo.glo import PretrainConfig, glo_pretrain
from cglo.metrics import psnr, summarize
from cglo.recon import ReconConfig, ReconJob, cglo_reconstruct
from cglo.tomo import Geometry, fbp, radon_forward, uniform_angles


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--train-scans", type=int, default=25)
    ap.add_argument("--test-scans", type=int, default=5)
    ap.add_argument("--slices", type=int, default=8)
    ap.add_argument("--latent-dim", type=int, default=64)
    ap.add_argument("--channels", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--checkpoint", help="load instead of pretraining")
    ap.add_argument("--save", help="write the pretrained decoder here")
    ap.add_argument("--angles", type=int, nargs="+", default=[9, 50])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr-latent", type=float, default=1e-2)
    ap.add_argument("--lr-weights", type=float, default=5e-5)
    ap.add_argument("--factor", type=int, default=8)
    ap.add_argument("--loss", default="squared_l1")
    a = ap.parse_args()

    t0 = time.perf_counter()
    if a.checkpoint:
        pre, _ = load_checkpoint(a.checkpoint)
    else:
        train = [generate_scan(1000 + i, a.size, a.slices) for i in range(a.train_scans)]
        spec = DecoderSpec(a.latent_dim, a.channels, a.size)
        pre = glo_pretrain(train, spec, PretrainConfig(epochs=a.epochs, seed=0)).params
        if a.save:
            save_checkpoint(a.save, pre)
        print(f"pretrain {time.perf_counter() - t0:.0f}s")
    g = Geometry.for_size(a.size)
    scans = [generate_scan(5000 + s, a.size, a.slices) for s in range(a.test_scans)]
    truths = [x for sc in scans for x in sc.slices]
    print("n_angles,arm,psnr_median,psnr_half_iqr,seconds")
    for n in a.angles:
        ang = uniform_angles(n)
        sinos = [[radon_forward(x, g, ang) for x in sc.slices] for sc in scans]
        fb = [fbp(y, g, ang, a.size) for ys in sinos for y in ys]
        s = summarize([psnr(x, t) for x, t in zip(fb, truths)])
        print(f"{n},fbp,{s.median:.2f},{s.half_iqr:.2f},0")
        for arm, dec in (("pretrained", pre), ("fresh", pre.spec)):
            t1 = time.perf_counter()
            out = []
            for k, ys in enumerate(sinos):
                cfg = ReconConfig(steps=a.steps, lr_latent=a.lr_latent, lr_weights=a.lr_weights,
                                  augment_factor=a.factor, loss_kind=a.loss, seed=k)
                out += cglo_reconstruct(ReconJob(ys, ang, g, dec, cfg)).slices
            s = summarize([psnr(x, t) for x, t in zip(out, truths)])
            print(f"{n},{arm},{s.median:.2f},{s.half_iqr:.2f},{time.perf_counter() - t1:.0f}",
                  flush=True)


if __name__ == "__main__":
    main()
