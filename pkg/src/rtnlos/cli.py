"""Command-line entry points: simulate, run, reconstruct, snr, psf, bench.

Exit codes: 0 ok, 2 configuration error, 3 stream error, 4 capacity error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .averaging import GainCurve, estimate_gain, write_psf_csv, write_snr_csv
from .config import SystemConfig, build_frequency_set, derive_virtual_grid, load_config
from .errors import CalibrationError, CapacityError, ConfigError, StreamError
from .experiments import FrameReconstructor, psf_sweep, reduced_config, snr_sweep
from .fdh import apply_cell_weights, bin_frame, load_fdh, save_fdh
from .pipeline import (FileSource, ImageFormer, NullSink, PGMSink, SimulatorSource,
                       SocketSource, run_pipeline)
from .rsd import backproject_oracle, save_volume, write_pgm16
from .simulator import Scene, SurfacePatch, load_scene, simulate_stream, write_manifest
from .stream import StreamParser, read_stream, write_stream

log = logging.getLogger("rtnlos")

VARIANTS = {
    "rsd": (False, False),
    "rsd_gain": (False, True),
    "rsd_avg": (True, False),
    "rsd_gain_avg": (True, True),
}


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _config(args) -> SystemConfig:
    cfg = load_config(args.config) if args.config else SystemConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def cmd_simulate(args):
    cfg = _config(args)
    scene = load_scene(args.scene)
    n = args.frames if args.frames is not None else int(round(args.duration * cfg.frame_rate_hz))
    times = [i / cfg.frame_rate_hz for i in range(n + 1)]
    scene.validate(cfg.volume, times)
    words, manifest = simulate_stream(scene, cfg, n, args.seed)
    write_stream(args.out, words, cfg.hash64())
    manifest_path = args.manifest or str(args.out) + ".json"
    write_manifest(manifest_path, manifest)
    print(f"wrote {n} frames, {len(words)} records to {args.out}; manifest {manifest_path}")
    return 0


def _sink(spec):
    if spec in (None, "null"):
        return NullSink()
    if spec.startswith("pgm:"):
        return PGMSink(spec[4:])
    raise ConfigError(f"unknown sink {spec!r} (use null or pgm:DIR)")


def cmd_run(args):
    cfg = _config(args)
    if args.input:
        source = FileSource(args.input, cfg.frame_rate_hz, args.max_speed)
        if source.config_hash not in (0, cfg.hash64()):
            log.warning("stream was recorded with a different configuration")
    elif args.socket:
        host, port = args.socket.rsplit(":", 1)
        source = SocketSource((host, int(port)))
    elif args.scene:
        source = SimulatorSource(load_scene(args.scene), cfg, args.frames, args.seed,
                                 args.max_speed)
    else:
        raise ConfigError("run needs --input, --socket or --scene")
    report = run_pipeline(source, cfg, _sink(args.sink))
    text = "\n".join(report.lines())
    print(text)
    if args.report:
        Path(args.report).write_text(text + "\n")
    return 0


def _frames_from_input(path, cfg, grid, freqs):
    """Yield (frame_id, raw FDH) from a stream file or an FDH dump."""
    blob = Path(path).read_bytes()[:4]
    if blob == b"NFDH":
        fdh, f, _ = load_fdh(path)
        if not np.allclose(f, freqs.frequencies_hz):
            raise ConfigError("FDH dump was binned with a different frequency set")
        yield fdh.frame_id, fdh
        return
    _, words = read_stream(path)
    parser = StreamParser(cfg, grid)
    for fe in parser.feed(words) + parser.finish():
        yield fe.frame_id, bin_frame(fe, freqs, (grid.rows, grid.cols),
                                     cfg.pipeline.table_size)


def cmd_reconstruct(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = derive_virtual_grid(cfg.scan, cfg.spads, cfg.relay)
    freqs = build_frequency_set(cfg.phasor)
    gain_path = args.gain_file or cfg.pipeline.gain_file
    gain = GainCurve.load(gain_path) if gain_path else None
    if args.variants == "all":
        names = list(VARIANTS)
    else:
        # unset flags follow the configuration, as the pipeline does
        use_avg = cfg.pipeline.averaging if args.averaging is None else args.averaging == "on"
        use_gain = gain is not None if args.gain is None else args.gain == "on"
        names = ["rsd" + ("_gain" if use_gain else "") + ("_avg" if use_avg else "")]
    if any(VARIANTS[n][1] for n in names) and gain is None:
        raise ConfigError("gain correction requested but no gain table given (--gain-file)")
    recon = None if args.method == "bp-oracle" else FrameReconstructor(cfg, grid, freqs=freqs)
    formers = {n: ImageFormer(cfg, VARIANTS[n][0], gain if VARIANTS[n][1] else None)
               for n in names}
    weights = grid.cell_weights()
    count = 0
    for frame_id, raw in _frames_from_input(args.input, cfg, grid, freqs):
        if args.save_fdh:
            save_fdh(out / f"fdh_{frame_id:05d}.nfdh", raw, freqs)
        fdh = apply_cell_weights(raw, weights)
        if recon is None:
            vol = backproject_oracle(fdh, grid, cfg.volume, freqs)
        else:
            vol = recon.volume(fdh)
        for n, former in formers.items():
            avg_vol, image, depth_map = former(vol)
            write_pgm16(out / f"{n}_{frame_id:05d}.pgm", image)
            write_pgm16(out / f"{n}_depth_{frame_id:05d}.pgm", depth_map, 1.0)
            if args.save_volumes:
                save_volume(out / f"{n}_{frame_id:05d}.nvol", avg_vol)
            count += 1
    print(f"wrote {count} images ({len(names)} variant(s)) to {out}")
    return 0


def cmd_snr(args):
    cfg = _config(args)
    if args.size:
        cfg = reduced_config(args.size, cfg)
    if args.trials < 2:
        raise ConfigError("snr needs at least two trials")
    res = snr_sweep(cfg, _floats(args.depths), args.trials, args.seed, args.patch,
                    progress=lambda m: log.info(m))
    write_snr_csv(args.out, res.tables)
    for method, rows in res.tables.items():
        print(method, " ".join(f"{r.depth_m:g}m:{r.normalized:.3f}" for r in rows))
    if args.gain_out:
        rows = res.tables["rsd"]
        estimate_gain([r.depth_m for r in rows], [r.mean for r in rows]).save(args.gain_out)
        print(f"gain table written to {args.gain_out}")
    print(f"{res.seconds:.1f} s; csv {args.out}")
    return 0


def cmd_psf(args):
    cfg = _config(args)
    if args.size:
        cfg = reduced_config(args.size, cfg)
    depths = _floats(args.depths)
    wavelengths = _floats(args.wavelengths) if args.wavelengths else [
        cfg.phasor.virtual_wavelength_m]
    rows, extra = [], []
    for lam in wavelengths:
        phasor = cfg.phasor.__class__(**{**cfg.phasor.__dict__, "virtual_wavelength_m": lam})
        got = psf_sweep(cfg.replace(phasor=phasor), depths)
        rows += got
        extra += [lam] * len(got)
    write_psf_csv(args.out, rows, {"wavelength_m": extra})
    for lam, r in zip(extra, rows):
        print(f"lambda {lam:g} m depth {r.depth_m:g} m: lateral {r.lateral_fwhm_m:.4f} m "
              f"axial {r.axial_fwhm_m:.4f} m{' (truncated)' if r.truncated else ''}")
    return 0


def cmd_bench(args):
    cfg = _config(args)
    if args.size:
        cfg = reduced_config(args.size, cfg, **({"z_min_m": 1.0, "z_max_m": 2.5,
                                                  "depth_spacing_m": 0.1}))
    scene = load_scene(args.scene) if args.scene else Scene(patches=(
        SurfacePatch((0.1, 0.0, 1.5), 0.5, 0.5, density_per_m2=400.0, name="patch.bench"),))
    words, _ = simulate_stream(scene, cfg, args.frames, args.seed)
    path = Path(args.stream or "bench.nlrt")
    write_stream(path, words, cfg.hash64())
    report = run_pipeline(FileSource(path, cfg.frame_rate_hz, args.max_speed), cfg, NullSink())
    print("\n".join(report.lines()))
    print(f"steady_queue_max {report.steady_queue_max()}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rtnlos", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file (defaults if omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("simulate", help="simulate a scene into a stream file")
    common(sp)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--duration", type=float, default=20.0, help="seconds (if --frames unset)")
    sp.add_argument("--manifest")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("run", help="run the real-time pipeline")
    common(sp)
    sp.add_argument("--input", help="stream file")
    sp.add_argument("--socket", help="host:port delivering the stream format")
    sp.add_argument("--scene", help="simulate this scene live")
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--sink", default="null", help="null or pgm:DIR")
    sp.add_argument("--max-speed", action="store_true", help="do not pace file/simulator input")
    sp.add_argument("--report")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("reconstruct", help="offline sequential reconstruction")
    common(sp)
    sp.add_argument("--input", required=True, help="stream file or FDH dump")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--method", choices=("rsd", "bp-oracle"), default="rsd")
    sp.add_argument("--averaging", choices=("on", "off"),
                    help="depth-dependent frame averaging (default: from the config)")
    sp.add_argument("--gain", choices=("on", "off"),
                    help="intensity gain correction (default: on if a gain table is set)")
    sp.add_argument("--gain-file")
    sp.add_argument("--variants", choices=("one", "all"), default="one",
                    help="all: plain, gain, averaged and gain+averaged images")
    sp.add_argument("--save-volumes", action="store_true")
    sp.add_argument("--save-fdh", action="store_true")
    sp.set_defaults(fn=cmd_reconstruct)

    sp = sub.add_parser("snr", help="SNR versus depth sweep of a square patch")
    common(sp)
    sp.add_argument("--depths", default="1,1.5,2,2.5,3,3.5")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--size", type=int, default=64, help="virtual grid size (0: config grid)")
    sp.add_argument("--patch", type=float, default=1.5, help="patch width, m")
    sp.add_argument("--out", default="snr.csv")
    sp.add_argument("--gain-out", help="also write a gain table from the RSD means")
    sp.set_defaults(fn=cmd_snr)

    sp = sub.add_parser("psf", help="point-spread-function width versus depth")
    common(sp)
    sp.add_argument("--depths", default="1,1.5,2,2.5,3")
    sp.add_argument("--wavelengths", help="comma-separated virtual wavelengths, m")
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--out", default="psf.csv")
    sp.set_defaults(fn=cmd_psf)

    sp = sub.add_parser("bench", help="simulate a desk-scale stream and time the pipeline")
    common(sp)
    sp.add_argument("--size", type=int, default=128)
    sp.add_argument("--frames", type=int, default=100)
    sp.add_argument("--scene")
    sp.add_argument("--stream", help="where to keep the simulated stream")
    sp.add_argument("--max-speed", action="store_true")
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CalibrationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except StreamError as exc:
        print(f"stream error: {exc}", file=sys.stderr)
        return StreamError.exit_code
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return CapacityError.exit_code


if __name__ == "__main__":
    sys.exit(main())
