"""Lateral and axial PSF width of a point target versus depth and virtual wavelength.

    python scripts/psf_sweep.py --wavelengths 0.04,0.08,0.16 --out psf.csv

Reconstructions are noise free (expected FDH), so the widths are those of
the imaging operator itself.
"""
import argparse
import dataclasses

from rtnlos.averaging import write_psf_csv
from rtnlos.config import SystemConfig, load_config
from rtnlos.experiments import psf_sweep, reduced_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depths", default="1,1.5,2,2.5,3")
    p.add_argument("--wavelengths", default="0.08")
    p.add_argument("--cutoff", type=float, default=0.5)
    p.add_argument("--span", type=float, default=40e-9, help="histogram span, s")
    p.add_argument("--out", default="psf.csv")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else SystemConfig()
    cfg = reduced_config(args.size, cfg)
    depths = [float(z) for z in args.depths.split(",")]
    rows, lams = [], []
    for lam in (float(v) for v in args.wavelengths.split(",")):
        phasor = dataclasses.replace(cfg.phasor, virtual_wavelength_m=lam,
                                     spectral_cutoff=args.cutoff, histogram_span_s=args.span)
        got = psf_sweep(cfg.replace(phasor=phasor), depths)
        rows += got
        lams += [lam] * len(got)
    write_psf_csv(args.out, rows, {"wavelength_m": lams})
    print(f"{'lambda_m':>8} {'depth_m':>7} {'lateral_m':>9} {'axial_m':>8}")
    for lam, r in zip(lams, rows):
        flag = "  (lower bound)" if r.truncated else ""
        print(f"{lam:8.3f} {r.depth_m:7.2f} {r.lateral_fwhm_m:9.4f} {r.axial_fwhm_m:8.4f}{flag}")
    by_lam = {}
    for lam, r in zip(lams, rows):
        by_lam.setdefault(lam, {})[r.depth_m] = r.lateral_fwhm_m
    for lam, widths in by_lam.items():
        if 1.0 in widths and 2.0 in widths:
            print(f"lambda {lam:g} m: lateral FWHM ratio 2 m / 1 m = "
                  f"{widths[2.0] / widths[1.0]:.2f}")


if __name__ == "__main__":
    main()
