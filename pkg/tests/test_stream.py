import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtnlos.config import SystemConfig, derive_virtual_grid
from rtnlos.errors import StreamError
from rtnlos.stream import (FRAME_END, FRAME_START, HEADER_SIZE, OVERFLOW, SYNC_WRAP, Marker,
                           Photon, StreamParser, decode_record, demux_pixel, encode_frame,
                           encode_record, encode_records, grid_index, parse_header,
                           parse_stream, read_stream, remap_virtual, stream_bytes, write_stream)

# a frame budget of exactly 2400 pulses per scan point
PPP_2400 = SystemConfig(frame_rate_hz=5e6 / (2400 * 4180))


@pytest.fixture(scope="module")
def cfg():
    return SystemConfig()


@pytest.fixture(scope="module")
def grid(cfg):
    return derive_virtual_grid(cfg.scan, cfg.spads, cfg.relay)


# --- record codec ----------------------------------------------------------------

def test_decode_examples():
    assert decode_record(0x064E2200) == Photon(3, 5000, 512)
    assert decode_record(0x80000000) == Marker(FRAME_START)
    assert decode_record(0x82000000) == Marker(FRAME_END)
    assert decode_record(0xFE000000) == Marker(OVERFLOW)


@pytest.mark.parametrize("code", range(2, 63))
def test_reserved_marker_codes_raise_with_offset(code):
    word = (1 << 31) | (code << 25)
    with pytest.raises(StreamError, match="byte offset 20"):
        decode_record(word, offset=20)
    with pytest.raises(StreamError) as info:
        StreamParser(SystemConfig()).feed(np.array([0x80000000, 0, word], np.uint32))
    assert info.value.offset == HEADER_SIZE + 8


@settings(max_examples=300)
@given(st.integers(0, 62), st.integers(0, 2 ** 15 - 1), st.integers(0, 1023))
def test_photon_round_trip(ch, dtime, nsync):
    rec = Photon(ch, dtime, nsync)
    assert decode_record(encode_record(rec)) == rec


@pytest.mark.parametrize("code", [FRAME_START, FRAME_END, OVERFLOW])
def test_marker_round_trip(code):
    assert decode_record(encode_record(Marker(code))) == Marker(code)


def test_encode_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode_record(Photon(63, 0, 0))
    with pytest.raises(ValueError):
        encode_record(Photon(0, 1 << 15, 0))
    with pytest.raises(ValueError):
        encode_record(Marker(5))


def test_vectorised_encoding_matches_scalar(rng):
    ch = rng.integers(0, 63, 1000)
    dt = rng.integers(0, 1 << 15, 1000)
    ns = rng.integers(0, 1024, 1000)
    words = encode_records(ch, dt, ns)
    for i in range(0, 1000, 37):
        assert words[i] == encode_record(Photon(int(ch[i]), int(dt[i]), int(ns[i])))


# --- per-record stages --------------------------------------------------------------

@pytest.mark.parametrize("ch,dtime,pixel,t", [
    (2, 6250, 9, 10e-9),  # window 1 starts at 40 ns
    (0, 0, 0, 0.0),
    (6, 22000, 27, 36e-9),  # 176 ns in window 3 (140-180 ns)
    (1, 4999, 4, 39.992e-9),
])
def test_demux_examples(cfg, ch, dtime, pixel, t):
    q, corrected = demux_pixel(Photon(ch, dtime, 0), cfg)
    assert q == pixel
    assert corrected == pytest.approx(t, abs=1e-15)


def test_demux_outside_windows(cfg):
    assert demux_pixel(Photon(0, 22500, 0), cfg) is None  # 180 ns
    assert demux_pixel(Photon(20, 10, 0), cfg) is None  # unmapped channel


@pytest.mark.parametrize("sync,point", [(0, 0), (2399, 0), (2400, 1), (7200, 3),
                                        (2400 * 4180 - 1, 4179)])
def test_grid_index_with_2400_pulses(sync, point):
    assert PPP_2400.pulses_per_point == 2400
    assert grid_index(sync, PPP_2400) == point


def test_grid_index_past_scan(cfg):
    assert grid_index(cfg.frame_syncs, cfg) is None
    with pytest.raises(ValueError):
        grid_index(-1, cfg)


def test_remap_examples(cfg, grid):
    # raster point 5*22 + 0: row 5, laser column 0; pixel offsets are q * 8/27 cm
    ev = remap_virtual(5 * 22, 0, grid, 20e-9, cfg)
    assert (ev.row, ev.col) == (5, 0)
    q = 10  # offset 2.96 cm -> virtual column 3
    ev = remap_virtual(5 * 22 + 4, q, grid, 20e-9, cfg)
    assert (ev.row, ev.col) == (5, 36 + 3)
    assert ev.wall_time_s < 20e-9  # device-to-wall flight removed


# --- frame encoding and parsing -------------------------------------------------------

def test_encode_example_dtime(cfg, rng):
    words = encode_frame([0], [9], [10e-9], cfg, rng)
    photons = [decode_record(w) for w in words if not w >> 31]
    assert photons == [Photon(2, 6250, photons[0].nsync)]


def test_empty_frame_is_markers_only(cfg, rng):
    words = encode_frame([], [], [], cfg, rng)
    recs = [decode_record(w) for w in words]
    assert recs[0] == Marker(FRAME_START) and recs[-1] == Marker(FRAME_END)
    assert recs[1:-1] == [Marker(OVERFLOW)] * 976
    frames = parse_stream(words, cfg)
    assert len(frames) == 1 and len(frames[0]) == 0


def test_parse_recovers_points_pixels_and_times(cfg, grid, rng):
    n = 5000
    points = rng.integers(0, cfg.scan.point_count, n)
    pixels = rng.integers(0, 28, n)
    times = rng.uniform(16e-9, 39e-9, n)  # past the ~15 ns cable delay
    words = encode_frame(points, pixels, times, cfg, rng)
    (fe,) = parse_stream(words, cfg, grid)
    # the parser drops nothing that lands on the aperture
    rows, cols = cfg.scan.point_rc(points)
    vcol = grid.column_map[cols, pixels]
    keep = vcol >= 0
    assert len(fe) == keep.sum()
    from rtnlos.config import calibration_offsets
    d_laser, d_spad = calibration_offsets(cfg)
    wall = times - d_laser[rows, cols] - d_spad[pixels]
    want = sorted(zip(rows[keep], vcol[keep], pixels[keep], np.round(wall[keep] / 8e-12)))
    got = sorted(zip(fe.rows, fe.cols, fe.pixels, np.round(fe.wall_time_s / 8e-12)))
    # times come back on the 8 ps grid, so compare to within one bin
    for (r0, c0, q0, t0), (r1, c1, q1, t1) in zip(want, got):
        assert (r0, c0, q0) == (r1, c1, q1)
        assert abs(t0 - t1) <= 1


def test_overflow_markers_extend_sync_count(cfg, rng):
    words = encode_frame([4179], [0], [25e-9], cfg, rng)
    (fe,) = parse_stream(words, cfg)
    assert len(fe) == 1 and fe.rows[0] == cfg.scan.rows - 1


def test_photons_outside_frames_are_counted(cfg):
    words = np.array([encode_record(Photon(0, 100, 0))], np.uint32)
    parser = StreamParser(cfg)
    assert parser.feed(words) == []
    assert parser.dropped["outside_frame"] == 1


def test_backwards_sync_is_an_error(cfg):
    words = np.array([0x80000000, encode_record(Photon(0, 10, 500)),
                      encode_record(Photon(0, 10, 100))], np.uint32)
    with pytest.raises(StreamError) as info:
        StreamParser(cfg).feed(words)
    assert info.value.offset == HEADER_SIZE + 8


def test_chunked_feed_equals_whole(cfg, grid, rng):
    words = np.concatenate([encode_frame(rng.integers(0, 4180, 300), rng.integers(0, 28, 300),
                                         rng.uniform(0, 40e-9, 300), cfg, rng)
                            for _ in range(3)])
    whole = parse_stream(words, cfg, grid)
    parser = StreamParser(cfg, grid)
    parts = []
    for chunk in np.array_split(words, 17):
        parts += parser.feed(chunk)
    parts += parser.finish()
    assert len(parts) == len(whole) == 3
    for a, b in zip(whole, parts):
        np.testing.assert_array_equal(a.cols, b.cols)
        np.testing.assert_array_equal(a.wall_time_s, b.wall_time_s)


def test_stream_file_round_trip(tmp_path, cfg, rng):
    words = encode_frame([1, 2], [3, 4], [5e-9, 6e-9], cfg, rng)
    write_stream(tmp_path / "s.nlrt", words, cfg.hash64())
    h, back = read_stream(tmp_path / "s.nlrt")
    assert h == cfg.hash64()
    np.testing.assert_array_equal(back, words)
    assert stream_bytes(words, h) == (tmp_path / "s.nlrt").read_bytes()


def test_bad_header_and_truncated_body(tmp_path):
    with pytest.raises(StreamError):
        parse_header(b"XXXX" + bytes(10))
    (tmp_path / "t.nlrt").write_bytes(stream_bytes([0x80000000]) + b"\x01\x02")
    with pytest.raises(StreamError):
        read_stream(tmp_path / "t.nlrt")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4179), st.integers(0, 27),
                          st.floats(0.0, 39.9e-9)), max_size=40),
       st.integers(0, 2 ** 32 - 1))
def test_encode_parse_keeps_every_on_aperture_photon(photons, seed):
    cfg = SystemConfig()
    rng = np.random.default_rng(seed)
    p = np.array([x[0] for x in photons], dtype=np.int64)
    q = np.array([x[1] for x in photons], dtype=np.int64)
    t = np.array([x[2] for x in photons], dtype=float)
    words = encode_frame(p, q, t, cfg, rng)
    assert int(np.sum((words >> 25) == OVERFLOW | (1 << 6))) == 976
    (fe,) = parse_stream(words, cfg)
    dropped = fe.dropped["off_aperture"] + fe.dropped["negative_time"]
    assert len(fe) + dropped == len(photons)


def test_sync_wrap_constant():
    assert SYNC_WRAP == 1024
