"""Save and load model parameters as a single JSON document.

The document maps dotted parameter names ("module.block.layer.kind") to
{"shape": [...], "data": [...flat row-major floats...]}. JSON keeps the
files greppable and diffable; float64 round-trips exactly through repr.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ValidationError


def save_params(path, named_params):
    """Write [(name, Value)] to `path`."""
    doc = {}
    for name, p in named_params:
        doc[name] = {"shape": list(p.data.shape),
                     "data": [float(x) for x in p.data.ravel()]}
    with open(path, "w") as f:
        json.dump(doc, f)


def load_params(path, named_params):
    """Fill the Values in [(name, Value)] from `path`, in place.

    The checkpoint must carry exactly the expected names and shapes.
    """
    with open(path) as f:
        doc = json.load(f)
    expected = {name for name, _ in named_params}
    got = set(doc)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValidationError(
            f"checkpoint parameter names do not match: missing {missing}, extra {extra}")
    for name, p in named_params:
        entry = doc[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise ValidationError(
                f"checkpoint shape {shape} != expected {p.data.shape} for {name}")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"checkpoint entry {name} contains non-finite values")
        p.data = arr
