"""Self-describing text checkpoints.

Layout::

    lstm-tsa checkpoint
    {"format_version": 1, "kind": ..., "config": {...}, "manifest": [{"name": ..., "shape": [...]}, ...]}
    <name> <value> <value> ...      # one line per manifest entry, in order

Values are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

MAGIC = "lstm-tsa checkpoint"
FORMAT_VERSION = 1
KINDS = ("caption-model", "mil-image", "mil-video")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind, config, params):
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    manifest = [{"name": name, "shape": list(np.shape(arr))} for name, arr in params.items()]
    header = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "manifest": manifest}
    lines = [MAGIC, json.dumps(header, sort_keys=True)]
    for name, arr in params.items():
        flat = np.asarray(arr, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(flat)):
            raise FloatingPointError(f"parameter {name} has non-finite values")
        lines.append(" ".join([name] + [repr(float(x)) for x in flat]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path, kind=None):
    """Returns ``(header, params)``; checks magic, kind and every manifest shape."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if len(lines) < 2 or lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        header = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed header ({exc.msg})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if kind is not None and header.get("kind") not in ((kind,) if isinstance(kind, str) else tuple(kind)):
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
    manifest = header.get("manifest", [])
    body = lines[2:]
    if len(body) != len(manifest):
        raise CheckpointError(f"{path}: manifest lists {len(manifest)} tensors, file has {len(body)}")
    params = {}
    for lineno, (entry, line) in enumerate(zip(manifest, body), start=3):
        name, shape = entry["name"], tuple(entry["shape"])
        fields = line.split(" ")
        if fields[0] != name:
            raise CheckpointError(f"{path}: line {lineno}: expected tensor {name!r}, found {fields[0]!r}")
        try:
            values = np.array([float(x) for x in fields[1:]], dtype=np.float64)
        except ValueError:
            raise CheckpointError(f"{path}: line {lineno}: non-numeric value in {name!r}") from None
        if values.size != math.prod(shape):
            raise CheckpointError(
                f"{path}: line {lineno}: {name!r} declares shape {list(shape)} but has {values.size} values"
            )
        params[name] = values.reshape(shape)
    return header, params


def check_shapes(header, params, expected, path="checkpoint"):
    """Fail loudly when stored tensors disagree with the dims the header declares."""
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: tensors {sorted(params)} do not match expected {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(
                f"{path}: {name!r} has shape {list(params[name].shape)}, declared dims imply {list(shape)}"
            )
