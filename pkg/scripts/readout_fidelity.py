"""Sweep readout amplitude and compare measured misassignment with the two-Gaussian model.

Traces are synthesized in process, so no sockets are involved.
"""

import argparse
import math

import numpy as np

from qctrl.emulators import EmuDigitizerProfile, synth_readout_trace
from qctrl.readout import CODE_SCALE, homodyne, train_discriminator, two_gaussian_error


def iq_cloud(prof: EmuDigitizerProfile, state: int, shots: int) -> np.ndarray:
    pts = []
    for k in range(shots):
        x = synth_readout_trace(prof, state, [prof.seed, state, k]) / CODE_SCALE
        p = homodyne(x, prof.carrier_freq, prof.sample_rate)
        pts.append((p.i, p.q))
    return np.array(pts)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--shots", type=int, default=2000)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--record-length", type=int, default=1000)
    ap.add_argument("--amplitudes", default="0.005,0.01,0.0127,0.02,0.03")
    args = ap.parse_args()
    print(f"{'amplitude':>10} {'distance':>9} {'sigma_iq':>9} {'measured':>9} {'model':>9}")
    for a in (float(x) for x in args.amplitudes.split(",")):
        prof = EmuDigitizerProfile(record_length=args.record_length, amplitude=a, noise_sigma=args.sigma,
                                   phase_zero=0.0, phase_one=math.pi / 2, seed=7)
        p0, p1 = iq_cloud(prof, 0, args.shots), iq_cloud(prof, 1, args.shots)
        d = train_discriminator(p0, p1)
        wrong = np.sum(d.classify_many(p0) == 1) + np.sum(d.classify_many(p1) == 0)
        dist = float(np.linalg.norm(p1.mean(axis=0) - p0.mean(axis=0)))
        sig = float(np.sqrt(np.mean([p0.var(axis=0, ddof=1).mean(), p1.var(axis=0, ddof=1).mean()])))
        print(f"{a:>10.4f} {dist:>9.5f} {sig:>9.5f} {wrong / (2 * args.shots):>9.4f} "
              f"{two_gaussian_error(dist, sig):>9.4f}")


if __name__ == "__main__":
    main()
