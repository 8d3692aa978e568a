"""Atomic writes, staged output directories and PGM/PPM rasters."""

import numpy as np
import pytest

from densecxr.fileio import (atomic_write_text, encode_pgm, read_pgm, read_ppm, staged_output,
                             write_pgm, write_ppm)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes()[:11] == b"P5\n7 5\n255\n"


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (3, 4, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert read_pgm(p).tolist() == [[1, 2]]


def test_wrong_magic(tmp_path):
    p = tmp_path / "x.pgm"
    p.write_bytes(encode_pgm(np.zeros((2, 2))).replace(b"P5", b"P6", 1))
    with pytest.raises(ValueError, match="P5"):
        read_pgm(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "sub" / "f.txt", "hello")
    assert (tmp_path / "sub" / "f.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.txt"]


def test_staged_success_moves_files(tmp_path):
    out = tmp_path / "out"
    with staged_output(out) as stage:
        (stage / "a").mkdir()
        (stage / "a" / "x.txt").write_text("1")
        assert not (out / "a").exists()
    assert (out / "a" / "x.txt").read_text() == "1"
    assert sorted(p.name for p in out.iterdir()) == ["a"]


def test_staged_failure_leaves_nothing(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with staged_output(out) as stage:
            (stage / "partial.txt").write_text("half")
            raise RuntimeError("boom")
    assert not out.exists()


def test_staged_failure_keeps_existing_files(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "old.txt").write_text("keep")
    with pytest.raises(ValueError):
        with staged_output(out) as stage:
            (stage / "old.txt").write_text("new")
            raise ValueError
    assert [p.name for p in out.iterdir()] == ["old.txt"]
    assert (out / "old.txt").read_text() == "keep"
