import numpy as np
import pytest

from splatpose.imageio import ImageFormatError, read_pgm, read_ppm, write_pgm, write_ppm


def test_ppm_round_trip_within_quantisation(tmp_path):
    img = np.random.default_rng(0).uniform(size=(7, 5, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_header_and_bytes(tmp_path):
    img = np.zeros((1, 2, 3))
    img[0, 1] = [1.0, 0.5, 0.0]
    write_ppm(tmp_path / "b.ppm", img)
    assert (tmp_path / "b.ppm").read_bytes() == b"P6\n2 1\n255\n" + bytes([0, 0, 0, 255, 128, 0])


def test_ppm_reads_comments(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(read_ppm(tmp_path / "c.ppm"), [[[1.0, 0.0, 0.2]]])


def test_pgm_16bit_round_trip(tmp_path):
    img = np.random.default_rng(1).uniform(size=(4, 6))
    write_pgm(tmp_path / "d.pgm", img)
    raw = (tmp_path / "d.pgm").read_bytes()
    assert raw.startswith(b"P5\n6 4\n65535\n") and len(raw) == len(b"P5\n6 4\n65535\n") + 48
    assert np.abs(read_pgm(tmp_path / "d.pgm") - img).max() <= 0.5 / 65535 + 1e-12


def test_pgm_8bit(tmp_path):
    write_pgm(tmp_path / "e.pgm", np.array([[0.0, 1.0]]), maxval=255)
    assert (tmp_path / "e.pgm").read_bytes() == b"P5\n2 1\n255\n\x00\xff"


@pytest.mark.parametrize("data, offset", [
    (b"P3\n1 1\n255\n\x00\x00\x00", 0),
    (b"P6\n1 x\n255\n\x00\x00\x00", 5),
    (b"P6\n2 1\n255\n\x00\x00\x00", 14),
    (b"P6\n1 1\n200\n\x00\xc9\x00", 12),
])
def test_malformed_files_report_offset(tmp_path, data, offset):
    p = tmp_path / "bad.ppm"
    p.write_bytes(data)
    with pytest.raises(ImageFormatError) as exc:
        read_ppm(p)
    assert exc.value.offset == offset
    assert str(p) in str(exc.value)


def test_writers_reject_bad_input(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.full((2, 2, 3), np.nan))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2)), maxval=70000)
