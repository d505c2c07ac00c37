import numpy as np
import pytest

from branchflow import io
from branchflow.core import DomainError, GridField, GridSpec


def test_parse_config():
    cfg = io.parse_config(
        """
        # comment
        alpha = 0.75
        n = 64      # trailing comment
        eps = [0.2, 0.1]
        name = "dipole"
        flag = true
        empty = []
        """
    )
    assert cfg == {"alpha": 0.75, "n": 64, "eps": [0.2, 0.1], "name": "dipole", "flag": True, "empty": []}
    assert isinstance(cfg["n"], int)


@pytest.mark.parametrize("text", ["novalue", "a b = 1", "x ="])
def test_parse_config_errors(text):
    with pytest.raises(DomainError):
        io.parse_config(text)


def test_config_hash_order_independent():
    a = io.config_hash({"a": 1, "b": [1.0, 2.0]})
    assert a == io.config_hash({"b": [1.0, 2.0], "a": 1})
    assert a != io.config_hash({"a": 2, "b": [1.0, 2.0]})
    assert len(a) == 16


def test_csv_roundtrip(tmp_path):
    path = str(tmp_path / "t.csv")
    rows = [{"eps": 0.1, "total": 1 / 3, "ok": True}, {"eps": 0.05, "total": 2.0, "ok": False}]
    io.write_csv(path, ("eps", "total", "ok"), rows, "abc123")
    h, back = io.read_csv(path)
    assert h == "abc123"
    assert float(back[0]["total"]) == 1 / 3
    assert back[1]["ok"] == "0"
    (tmp_path / "bad.csv").write_text("eps\n1\n")
    with pytest.raises(DomainError):
        io.read_csv(str(tmp_path / "bad.csv"))


def test_bgrid_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    spec = GridSpec(5, 3, 2.5, 1.5)
    u = GridField(spec, rng.standard_normal((6, 3)), rng.standard_normal((5, 4)))
    path = str(tmp_path / "u.bgrid")
    io.write_bgrid(path, u, "h1")
    v = io.read_bgrid(path)
    assert v.spec == spec
    assert np.array_equal(v.ux, u.ux) and np.array_equal(v.uy, u.uy)
    assert io.bgrid_hash(path) == "h1"
    with open(path, "ab") as fh:
        fh.write(b"\0" * 8)
    with pytest.raises(DomainError):
        io.read_bgrid(path)


def test_pgm(tmp_path):
    spec = GridSpec(4, 2, 2.0, 1.0)
    ux = np.zeros((5, 2))
    ux[:, 1] = 2.0  # top row of cells
    u = GridField(spec, ux, np.zeros((4, 3)))
    path = str(tmp_path / "u.pgm")
    io.write_pgm(path, u, "hh")
    img = io.read_pgm(path)
    assert img.shape == (2, 4)
    assert np.all(img[0] == 255) and np.all(img[1] == 0)
    assert io.pgm_comment(path) == "hh"
    zero = io.magnitude_image(spec.zeros_field())
    assert not zero.any()


def test_read_density(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("1, 2\n3 4\n")
    f = io.read_density(str(p), 2.0)
    assert f.values.tolist() == [[1, 2], [3, 4]] and f.spec.Lx == 2.0
    np.save(tmp_path / "d.npy", np.ones((3, 3)))
    assert io.read_density(str(tmp_path / "d.npy")).spec.nx == 3
    (tmp_path / "r.txt").write_text("1 2 3\n4 5 6\n")
    with pytest.raises(DomainError):
        io.read_density(str(tmp_path / "r.txt"))
