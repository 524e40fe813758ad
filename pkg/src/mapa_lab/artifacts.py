"""Artifact writing with provenance headers and idempotency checks.

Every file the pipeline emits carries a JSON provenance header (config
hash, seed, code version) sufficient to regenerate it: JSON artifacts get
a top-level "provenance" key; CSV artifacts start with a single
``# {...}`` comment line that readers skip with ``comment='#'``.
"""

import csv
import hashlib
import io
import json
import os

from . import __version__


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config: dict, seed) -> dict:
    return {"config_hash": config_hash(config), "seed": seed, "version": __version__}


def write_csv(path, fieldnames, rows, prov: dict):
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fieldnames})
    return path


def read_csv(path):
    """Read back (provenance | None, fieldnames, rows-as-dicts)."""
    with open(path) as f:
        first = f.readline()
        prov = None
        if first.startswith("#"):
            prov = json.loads(first[1:].strip())
            rest = f.read()
        else:
            rest = first + f.read()
    reader = csv.DictReader(io.StringIO(rest))
    return prov, reader.fieldnames, list(reader)


def write_json(path, payload: dict, prov: dict):
    payload = dict(payload)
    payload["provenance"] = prov
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_jsonify)
        f.write("\n")
    return path


def _jsonify(obj):
    import numpy as np
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def existing_matches(path, prov: dict) -> bool:
    """True when `path` exists and was produced by the same config hash."""
    if not os.path.exists(path):
        return False
    try:
        if path.endswith(".json"):
            with open(path) as f:
                old = json.load(f).get("provenance", {})
        else:
            old, _, _ = read_csv(path)
            old = old or {}
        return old.get("config_hash") == prov.get("config_hash")
    except (json.JSONDecodeError, OSError):
        return False
