# adacare/models/params.py
"""Named parameter collections and their binary file format."""
import json
import logging
from collections import OrderedDict
from pathlib import Path

import numpy as np

from adacare.errors import DataError, ShapeError

logger = logging.getLogger(__name__)

PARAMS_FORMAT = "adacare-params"
PARAMS_VERSION = 1


class ParamSet:
    """
    Ordered mapping from unique parameter names to float64 arrays.

    Used for the weights themselves, for gradients, and for optimizer moments;
    ``flatten``/``unflatten`` give a lossless single-vector view in name order.
    """

    def __init__(self, arrays=None):
        self._arrays = OrderedDict()
        for name, value in (arrays or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        self._arrays[name] = np.array(value, dtype=np.float64, copy=True)

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self):
        return OrderedDict((name, arr.shape) for name, arr in self._arrays.items())

    @property
    def size(self):
        return int(sum(arr.size for arr in self._arrays.values()))

    def copy(self):
        return ParamSet(self._arrays)

    def zeros_like(self):
        return ParamSet(OrderedDict((name, np.zeros_like(arr)) for name, arr in self._arrays.items()))

    def map(self, fn):
        return ParamSet(OrderedDict((name, fn(arr)) for name, arr in self._arrays.items()))

    def flatten(self):
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for arr in self._arrays.values()])

    def unflatten(self, vector):
        """New ParamSet with this set's names and shapes, filled from ``vector``."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeError(f"unflatten: expected a vector of length {self.size}, got shape {vector.shape}")
        out = OrderedDict()
        offset = 0
        for name, arr in self._arrays.items():
            out[name] = vector[offset:offset + arr.size].reshape(arr.shape)
            offset += arr.size
        return ParamSet(out)

    def locate(self, flat_index):
        """Map a flat-vector position back to (name, index tuple)."""
        offset = 0
        for name, arr in self._arrays.items():
            if flat_index < offset + arr.size:
                return name, tuple(int(i) for i in np.unravel_index(flat_index - offset, arr.shape))
            offset += arr.size
        raise IndexError(f"flat index {flat_index} is out of range for {self.size} parameters")

    def non_finite_names(self):
        """Names of arrays holding NaN or inf, in set order."""
        return [name for name, arr in self._arrays.items() if not np.isfinite(arr).all()]

    def check_aligned(self, other, what="parameters"):
        if self.shapes() != other.shapes():
            raise ShapeError(f"{what} are not aligned: {dict(self.shapes())} vs {dict(other.shapes())}")

    def equals(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self[n], other[n]) for n in self.names()))

    # ------------------------------------------------------------------
    # Binary format: 8-byte little-endian header length, UTF-8 JSON header
    # listing (name, shape, offset), then little-endian float64 values.
    # ------------------------------------------------------------------

    def to_bytes(self, metadata=None):
        entries = []
        offset = 0
        for name, arr in self._arrays.items():
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
        header = {
            "format": PARAMS_FORMAT,
            "version": PARAMS_VERSION,
            "dtype": "<f8",
            "count": offset,
            "entries": entries,
            "metadata": metadata or {},
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        body = self.flatten().astype("<f8").tobytes()
        return len(header_bytes).to_bytes(8, "little") + header_bytes + body

    @classmethod
    def from_bytes(cls, blob):
        """Parse the binary format; returns (ParamSet, metadata)."""
        if len(blob) < 8:
            raise DataError("parameter file is truncated")
        header_len = int.from_bytes(blob[:8], "little")
        try:
            header = json.loads(blob[8:8 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"parameter file header is unreadable: {e}")
        if header.get("format") != PARAMS_FORMAT:
            raise DataError(f"not an {PARAMS_FORMAT} file")
        values = np.frombuffer(blob[8 + header_len:], dtype="<f8")
        if values.size != header["count"]:
            raise DataError(f"parameter file holds {values.size} values, header declares {header['count']}")
        arrays = OrderedDict()
        for entry in header["entries"]:
            size = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            arrays[entry["name"]] = values[start:start + size].reshape(entry["shape"]).astype(np.float64)
        return cls(arrays), header.get("metadata", {})

    def save(self, path, metadata=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes(metadata))
        logger.info(f"Saved {self.size} parameters to {path}")
        return path

    @classmethod
    def load(cls, path):
        """Read a parameter file; returns (ParamSet, metadata)."""
        return cls.from_bytes(Path(path).read_bytes())
