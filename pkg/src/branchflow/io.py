"""File formats: flat key/value configs, hashed CSV tables, binary grid fields and PGM images."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .core import DomainError, GridField, GridSpec, ScalarGrid

logger = logging.getLogger(__name__)

BGRID_MAGIC = b"BGRID1\n"
HASH_PREFIX = "# config-hash: "

Value = Union[int, float, bool, str, List]


# ---------------------------------------------------------------------------
# configs


def _parse_value(text: str) -> Value:
    t = text.strip()
    if not t:
        raise DomainError("empty config value")
    if t[0] == "[" and t[-1] == "]":
        inner = t[1:-1].strip()
        return [_parse_value(x) for x in inner.split(",")] if inner else []
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def parse_config(text: str) -> Dict[str, Value]:
    """``key = value`` lines; ``#`` starts a comment; values are numbers, booleans, strings or flat lists."""
    out: Dict[str, Value] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"config line {n}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise DomainError(f"config line {n}: bad key {key!r}")
        out[key] = _parse_value(val)
    return out


def read_config(path: str) -> Dict[str, Value]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_hash(cfg: Mapping[str, object]) -> str:
    """Short digest of the canonical (sorted, JSON-encoded) configuration."""
    blob = json.dumps({k: cfg[k] for k in sorted(cfg)}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tables


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Mapping[str, object]], chash: str) -> str:
    """CSV with a leading ``# config-hash`` line; floats are written in round-trip form."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(HASH_PREFIX + chash + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_csv(path: str):
    """Returns ``(config_hash, rows)`` with values left as strings."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith(HASH_PREFIX):
            raise DomainError(f"{path}: missing config-hash header")
        rows = list(csv.DictReader(fh))
    return first[len(HASH_PREFIX):].strip(), rows


def write_json(path: str, obj: Mapping[str, object], chash: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {"config_hash": chash}
    payload.update(obj)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# grids


def write_bgrid(path: str, u: GridField, chash: str = "") -> str:
    """Binary field: magic line, one JSON header line, then ``ux`` and ``uy`` as little-endian float64."""
    s = u.spec
    header = {"nx": s.nx, "ny": s.ny, "Lx": s.Lx, "Ly": s.Ly, "config_hash": chash}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BGRID_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(u.ux, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(u.uy, dtype="<f8").tobytes())
    return path


def read_bgrid(path: str) -> GridField:
    with open(path, "rb") as fh:
        if fh.readline() != BGRID_MAGIC:
            raise DomainError(f"{path}: not a bgrid file")
        header = json.loads(fh.readline())
        spec = GridSpec(int(header["nx"]), int(header["ny"]), float(header["Lx"]), float(header["Ly"]))
        nux = (spec.nx + 1) * spec.ny
        nuy = spec.nx * (spec.ny + 1)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != nux + nuy:
        raise DomainError(f"{path}: expected {nux + nuy} values, found {data.size}")
    return GridField(spec, data[:nux].reshape(spec.nx + 1, spec.ny), data[nux:].reshape(spec.nx, spec.ny + 1))


def bgrid_hash(path: str) -> str:
    with open(path, "rb") as fh:
        if fh.readline() != BGRID_MAGIC:
            raise DomainError(f"{path}: not a bgrid file")
        return str(json.loads(fh.readline()).get("config_hash", ""))


def read_density(path: str, L: float = 1.0) -> ScalarGrid:
    """Square density from a whitespace/comma separated text matrix (row index = x) or a ``.npy`` array."""
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read().replace(",", " ")
        arr = np.loadtxt(text.splitlines(), ndmin=2)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DomainError(f"{path}: density must be a square matrix, got shape {arr.shape}")
    n = arr.shape[0]
    return ScalarGrid(GridSpec(n, n, L, L), arr)


def magnitude_image(u: GridField) -> np.ndarray:
    """Cell magnitudes mapped linearly to 0..255 with the maximum at 255; rows run from top (high y) down."""
    mag = u.cell_magnitude()
    peak = float(mag.max()) if mag.size else 0.0
    if peak > 0:
        img = np.rint(mag / peak * 255.0)
    else:
        img = np.zeros_like(mag)
    return np.clip(img, 0, 255).astype(np.uint8).T[::-1]


def write_pgm(path: str, u: GridField, chash: str = "") -> str:
    """Binary PGM of :func:`magnitude_image`; the config hash goes in a header comment."""
    img = magnitude_image(u)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if chash:
            fh.write((HASH_PREFIX + chash + "\n").encode())
        fh.write(b"%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise DomainError(f"{path}: not a binary PGM")
        tokens: List[int] = []
        while len(tokens) < 3:
            line = fh.readline()
            if not line:
                raise DomainError(f"{path}: truncated PGM header")
            line = line.split(b"#", 1)[0]
            tokens.extend(int(t) for t in line.split())
        w, h, _ = tokens
        data = fh.read()
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)


def pgm_comment(path: str) -> Optional[str]:
    """Config hash stored in a PGM header, if any."""
    with open(path, "rb") as fh:
        fh.readline()
        line = fh.readline().decode("ascii", "replace")
    return line[len(HASH_PREFIX):].strip() if line.startswith(HASH_PREFIX) else None
