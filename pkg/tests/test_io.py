import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slope_lab.io import (atomic_write, dumps_json, read_grid_csv, read_json, read_pgm, to_uint8, write_grid_csv,
                          write_json, write_pgm)


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    p = tmp_path / "sub" / "a.txt"
    atomic_write(p, "one")
    atomic_write(p, "two")
    assert p.read_text() == "two"
    assert [x.name for x in p.parent.iterdir()] == ["a.txt"]
    atomic_write(tmp_path / "b.bin", b"\x00\x01")
    assert (tmp_path / "b.bin").read_bytes() == b"\x00\x01"


def test_atomic_write_failure_cleans_up(tmp_path):
    with pytest.raises(TypeError):
        atomic_write(tmp_path / "c.txt", 123)
    assert list(tmp_path.iterdir()) == []


def test_json_strict_and_numpy():
    text = dumps_json({"a": np.float64(np.inf), "b": np.arange(2), "c": (1, np.int64(2)), "d": float("nan")})
    data = json.loads(text)
    assert data == {"a": None, "b": [0, 1], "c": [1, 2], "d": None}


def test_json_round_trip(tmp_path):
    write_json(tmp_path / "r.json", {"x": [1.5, 2]})
    assert read_json(tmp_path / "r.json") == {"x": [1.5, 2]}


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_grid_csv_exact_round_trip(tmp_path_factory, seed, h, w):
    grid = np.random.default_rng(seed).normal(size=(h, w)) * 1e3
    p = tmp_path_factory.mktemp("g") / "g.csv"
    write_grid_csv(p, grid)
    assert np.array_equal(read_grid_csv(p), grid)


def test_pgm_round_trip_and_sidecar(tmp_path):
    # values chosen so some pixels are whitespace bytes (9..13, 32)
    grid = np.array([[0.0, 9.0, 10.0], [13.0, 32.0, 255.0]])
    p = write_pgm(tmp_path / "h.pgm", grid)
    img = read_pgm(p)
    np.testing.assert_array_equal(img, grid.astype(np.uint8))
    side = read_json(tmp_path / "h.json")
    assert side == {"min": 0.0, "max": 255.0, "width": 3, "height": 2}
    assert p.read_bytes().startswith(b"P5\n3 2\n255\n")


def test_to_uint8_constant_and_range():
    img, lo, hi = to_uint8(np.full((2, 2), 7.0))
    assert img.max() == 0 and lo == hi == 7.0
    img, _, _ = to_uint8(np.array([[-1.0, 0.0, 1.0]]))
    assert list(img[0]) == [0, 128, 255]


def test_read_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "x.pgm")
