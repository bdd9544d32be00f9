"""Named parameter tensors and their on-disk checkpoint format.

Checkpoint layout: a plain-text header followed by a raw little-endian
float64 payload.

    DIFFTSE-PARAMS 1
    <name> <d0,d1,...> <byte offset into payload>
    ...
    END
    <payload>

Round trips are bit-exact.
"""

import numpy as np

from ..errors import CheckpointError

_MAGIC = "DIFFTSE-PARAMS 1"


class Param:
    """A trainable tensor with a gradient buffer of the same shape."""

    __slots__ = ("name", "values", "grads")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.asarray(values, dtype=np.float64)
        self.grads = np.zeros_like(self.values)

    def zero_grad(self):
        self.grads[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.values.shape})"


def _check_unique(params):
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate parameter names: {dupes}")


def save_params(path, params):
    """Write parameters to a checkpoint file."""
    _check_unique(params)
    header_lines = [_MAGIC]
    offset = 0
    blobs = []
    for p in params:
        arr = np.ascontiguousarray(p.values, dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        header_lines.append(f"{p.name} {shape} {offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header_lines.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(header_lines) + "\n").encode("ascii"))
        for b in blobs:
            f.write(b)


def load_params(path):
    """Read a checkpoint file; returns {name: float64 array}."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"END\n")
    if not raw.startswith(_MAGIC.encode("ascii")) or end < 0:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    header = raw[:end].decode("ascii").splitlines()[1:]
    payload = raw[end + 4:]
    out = {}
    entries = []
    for line in header:
        if not line.strip():
            continue
        try:
            name, shape_s, off_s = line.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(
                int(d) for d in shape_s.split(",")
            )
            entries.append((name, shape, int(off_s)))
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad header line {line!r}") from exc
    for name, shape, off in entries:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape)
        out[name] = arr.astype(np.float64)
    return out


def load_into(params, path):
    """Load a checkpoint into existing Param objects, matching by name."""
    stored = load_params(path)
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"{path}: missing parameter {p.name!r}")
        if stored[p.name].shape != p.values.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {p.name!r}: "
                f"{stored[p.name].shape} vs {p.values.shape}"
            )
        p.values[...] = stored[p.name]
    extra = set(stored) - {p.name for p in params}
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
