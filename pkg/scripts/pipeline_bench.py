"""Desk-scale throughput and latency of the five-stage pipeline.

    python scripts/pipeline_bench.py --frames 100

Simulates a stream for the 128 x 128 desk configuration, replays it once as
fast as possible (throughput) and once paced at the frame rate (latency and
steady-state queue depth), and prints both run reports.
"""
import argparse
import os
import tempfile
from pathlib import Path

from rtnlos.config import load_config
from rtnlos.experiments import FrameReconstructor
from rtnlos.pipeline import FileSource, NullSink, run_pipeline
from rtnlos.simulator import load_scene, simulate_stream
from rtnlos.stream import write_stream

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.ini"))
    p.add_argument("--scene", default=str(ROOT / "scenes" / "desk_bench.ini"))
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=9)
    p.add_argument("--workers", type=int, help="threads for binning and reconstruction")
    args = p.parse_args()

    cfg = load_config(args.config)
    if args.workers:
        cfg = cfg.with_overrides([f"pipeline.binning_workers={args.workers}",
                                  f"pipeline.reconstruction_workers={args.workers}"])
    words, _ = simulate_stream(load_scene(args.scene), cfg, args.frames, args.seed)
    recon = FrameReconstructor(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bench.nlrt"
        write_stream(path, words, cfg.hash64())
        for label, fast in (("max speed", True), ("paced", False)):
            rep = run_pipeline(FileSource(path, cfg.frame_rate_hz, fast), cfg, NullSink(),
                               reconstructor=recon)
            print(f"== {label} replay")
            print("\n".join(rep.lines()))
            print(f"steady_queue_max {rep.steady_queue_max()}")
    print(f"hardware threads: {os.cpu_count()}")


if __name__ == "__main__":
    main()
