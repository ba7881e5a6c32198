"""Single-file snapshots: a text header followed by little-endian doubles.

Layout::

    VPGRAV1
    dims=1,1,128,16,16,64
    role=steady
    ...more key=value lines...
    END
    <prod(dims) little-endian float64 values, row-major>
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass

import numpy as np

MAGIC = b"VPGRAV1"
END = b"END"


class SnapshotError(IOError):
    pass


@dataclass
class Snapshot:
    values: np.ndarray
    meta: dict


def _meta_from(data, meta):
    from vpgrav.grids import Distribution

    out = {}
    if isinstance(data, Distribution):
        g, vg = data.grid, data.vgrid
        out.update(role=data.role, n1=g.n1, n2=g.n2, n3=g.n3, L3=repr(g.L3), refinement=repr(g.refinement),
                   m1=vg.m1, m2=vg.m2, m3=vg.m3, vmax=repr(vg.vmax))
        if data.beta is not None:
            out["beta"] = repr(float(data.beta))
        arr = data.values
    elif hasattr(data, "grid") and hasattr(data, "values"):
        g = data.grid
        out.update(n1=g.n1, n2=g.n2, n3=g.n3, L3=repr(g.L3), refinement=repr(g.refinement))
        arr = np.asarray(data.values)
    else:
        arr = np.asarray(data)
    out.setdefault("role", "array")
    out.update({k: (repr(v) if isinstance(v, float) else str(v)) for k, v in (meta or {}).items()})
    out.setdefault("timestamp", datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"))
    return arr, out


def write_snapshot(path, data, meta=None):
    """Write an array, Distribution or field-like object with extra metadata."""
    arr, m = _meta_from(data, meta)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    lines = [MAGIC, ("dims=" + ",".join(str(d) for d in arr.shape)).encode()]
    for k, v in m.items():
        if "\n" in str(v) or "=" in str(k) or k == "dims":
            raise SnapshotError(f"invalid metadata entry {k!r}")
        lines.append(f"{k}={v}".encode())
    lines.append(END)
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n")
        fh.write(arr.tobytes(order="C"))


def read_snapshot(path):
    """Read a snapshot; raises SnapshotError on a bad magic or payload length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    first, _, rest = blob.partition(b"\n")
    if first != MAGIC:
        raise SnapshotError(f"{path}: not a snapshot (bad magic {first[:16]!r})")
    meta = {}
    dims = None
    while True:
        line, sep, rest = rest.partition(b"\n")
        if not sep:
            raise SnapshotError(f"{path}: truncated header")
        if line == END:
            break
        k, eq, v = line.decode().partition("=")
        if not eq:
            raise SnapshotError(f"{path}: malformed header line {line!r}")
        if k == "dims":
            dims = tuple(int(d) for d in v.split(",") if d != "")
        else:
            meta[k] = v
    if dims is None:
        raise SnapshotError(f"{path}: header lacks dims")
    count = int(np.prod(dims)) if dims else 1
    if len(rest) != 8 * count:
        raise SnapshotError(f"{path}: payload holds {len(rest)} bytes, dims need {8 * count}")
    values = np.frombuffer(rest, dtype="<f8").reshape(dims).astype(np.float64)
    return Snapshot(values, meta)


def to_distribution(snap):
    """Rebuild a Distribution from a snapshot written from one."""
    from vpgrav.grids import Distribution, SpatialGrid, VelocityGrid

    m = snap.meta
    try:
        grid = SpatialGrid(int(m["n1"]), int(m["n2"]), int(m["n3"]), float(m["L3"]), float(m["refinement"]))
        vg = VelocityGrid(int(m["m1"]), int(m["m2"]), int(m["m3"]), float(m["vmax"]))
    except KeyError as exc:
        raise SnapshotError(f"snapshot lacks grid metadata {exc}") from None
    beta = float(m["beta"]) if "beta" in m else None
    return Distribution(grid, vg, snap.values, m.get("role", "steady"), beta)
