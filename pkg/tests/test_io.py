import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from ppdepth.io import (FormatError, ManifestRow, read_manifest, read_pfm, read_pgm, read_ply, sequence_ids,
                        write_manifest, write_pfm, write_pgm, write_ply)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=9),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_pfm_roundtrip_bit_exact(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("pfm") / "a.pfm"
    write_pfm(p, a)
    assert read_pfm(p).tobytes() == a.tobytes()


def test_pfm_layout_and_big_endian(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "a.pfm", a)
    blob = (tmp_path / "a.pfm").read_bytes()
    assert blob.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first on disk
    assert np.frombuffer(blob[-16:], "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]
    be = b"Pf\n2 2\n1.0\n" + a[::-1].astype(">f4").tobytes()
    (tmp_path / "b.pfm").write_bytes(be)
    assert np.array_equal(read_pfm(tmp_path / "b.pfm"), a)


@pytest.mark.parametrize("blob", [b"", b"P5\n2 2\n255\n", b"Pf\n2 2\n-1.0\n" + b"\0" * 12,
                                  b"Pf\nx 2\n-1.0\n" + b"\0" * 16, b"PF\n1 1\n-1.0\n" + b"\0" * 12,
                                  b"Pf\n2 2"])
def test_pfm_errors(tmp_path, blob):
    p = tmp_path / "bad.pfm"
    p.write_bytes(blob)
    with pytest.raises(FormatError, match="bad.pfm"):
        read_pfm(p)


def test_pfm_missing_file(tmp_path):
    with pytest.raises(FormatError, match="nope.pfm"):
        read_pfm(tmp_path / "nope.pfm")


def test_pgm_quantization_bound(tmp_path, rng):
    img = rng.uniform(size=(13, 17))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert np.max(np.abs(back - img)) <= 0.5 / 65535 + 1e-15
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n17 13\n65535\n")
    write_pgm(tmp_path / "b.pgm", img, maxval=255)
    assert np.max(np.abs(read_pgm(tmp_path / "b.pgm") - img)) <= 0.5 / 255 + 1e-15


def test_pgm_comments_and_errors(tmp_path):
    body = np.array([[0, 65535]], dtype=">u2").tobytes()
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1\n65535\n" + body)
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0.0, 1.0]]
    (tmp_path / "t.pgm").write_bytes(b"P5\n2 1\n65535\n" + body[:3])
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "t.pgm")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 1\n255\n0 255\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")


def test_ply_roundtrip_and_header(tmp_path, rng):
    pts = rng.standard_normal((20, 3)) * 100
    grey = rng.uniform(size=20)
    write_ply(tmp_path / "a.ply", pts, grey)
    text = (tmp_path / "a.ply").read_text()
    header = text[:text.index("end_header")].splitlines()
    assert header == ["ply", "format ascii 1.0", "comment ppdepth point cloud", "element vertex 20",
                      "property double x", "property double y", "property double z",
                      "property uchar red", "property uchar green", "property uchar blue"]
    back, inten = read_ply(tmp_path / "a.ply")
    assert back.tobytes() == pts.tobytes()
    assert np.max(np.abs(inten - grey)) <= 0.5 / 255 + 1e-12
    write_ply(tmp_path / "b.ply", pts[:0])
    assert read_ply(tmp_path / "b.ply")[0].shape == (0, 3)


def test_ply_errors(tmp_path):
    (tmp_path / "a.ply").write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "a.ply")
    (tmp_path / "b.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\n"
                                    "property double y\nproperty double z\nend_header\n1 2 3\n")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "b.ply")


def test_manifest_roundtrip(tmp_path):
    rows = [ManifestRow("a", ("img/a.pgm", "dep/a.pfm"), 55.4, 55.4, 31.5, 31.5),
            ManifestRow("b", ("/abs/b.pgm", "dep/b.pfm"), 1.0, 2.0, 3.0, 4.0)]
    write_manifest(tmp_path / "m.csv", rows)
    raw = read_manifest(tmp_path / "m.csv", resolve=False)
    assert raw == rows
    res = read_manifest(tmp_path / "m.csv")
    assert res[0].paths[0] == str(tmp_path / "img/a.pgm") and res[1].paths[0] == "/abs/b.pgm"
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "id,image_path,depth_path,fx,fy,cx,cy"
    write_manifest(tmp_path / "e.csv", rows, kind="eval")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "id,pred_path,gt_path,fx,fy,cx,cy"


@pytest.mark.parametrize("text", ["id,x\n", "id,image_path,depth_path,fx,fy,cx,cy\na,b,c,1,2\n",
                                  "id,image_path,depth_path,fx,fy,cx,cy\na,b,c,1,2,x,4\n"])
def test_manifest_errors(tmp_path, text):
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(FormatError, match="m.csv"):
        read_manifest(tmp_path / "m.csv")


def test_sequence_ids():
    assert sequence_ids("s", 3) == ["s0000", "s0001", "s0002"]
