"""Weight files: one JSON header line followed by raw little-endian float32 arrays.

A hybrid model directory holds one ``model_<net>_<idx>.bin`` per CNN,
``rbm.bin`` and ``manifest.json``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..errors import InputError
from .cnn import NetworkSpec
from .ensemble import CCNN_NETWORKS, PCNN_NETWORKS, CnnModel, HybridModel, model_layout, model_name
from .rbm import RbmParams

FORMAT = "latentpair-weights/1"


def write_arrays(path, header: dict, arrays: List[Tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header.update({"format": FORMAT, "dtype": "float32", "endianness": "little",
                   "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays]})
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_arrays(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise InputError(f"{path}: missing weight-file header")
    header = json.loads(raw[:nl])
    if header.get("format") != FORMAT or header.get("endianness") != "little":
        raise InputError(f"{path}: unsupported weight-file format")
    out: Dict[str, np.ndarray] = {}
    off = nl + 1
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"]))
        if off + 4 * n > len(raw):
            raise InputError(f"{path}: truncated array {spec['name']}")
        a = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(spec["shape"])
        out[spec["name"]] = a.astype(np.float32)
        off += 4 * n
    if off != len(raw):
        raise InputError(f"{path}: trailing or missing bytes")
    return header, out


def model_filename(mid) -> str:
    return f"model_{mid[0]}_{mid[1]}.bin"


def save_model(model: CnnModel, path) -> None:
    names = sorted(model.weights)
    write_arrays(path, {"model_id": list(model.model_id), "name": model_name(model.model_id),
                        "kind": model.kind, "method": model.method, "spec": model.spec.to_dict()},
                 [(n, model.weights[n]) for n in names])


def load_model(path) -> CnnModel:
    header, arrays = read_arrays(path)
    spec = NetworkSpec.from_dict(header["spec"])
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in arrays or tuple(arrays[name].shape) != tuple(shape):
            raise InputError(f"{path}: weight {name} missing or mis-shaped")
    return CnnModel(tuple(header["model_id"]), spec, arrays, header["kind"], header["method"])


def save_hybrid(model: HybridModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m in model.models:
        save_model(m, d / model_filename(m.model_id))
    rbm = model.rbm
    write_arrays(d / "rbm.bin", {"hidden": rbm.hidden, "inputs": rbm.inputs},
                 [(k, v) for k, v in rbm.arrays().items()])
    manifest = {"models": [list(m.model_id) for m in model.models],
                "files": [model_filename(m.model_id) for m in model.models],
                "binding": {"cCNN": {str(k): v for k, v in CCNN_NETWORKS.items()},
                            "pCNN": {str(k): v for k, v in PCNN_NETWORKS.items()}},
                "metadata": model.metadata}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=float))


def load_hybrid(directory) -> HybridModel:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise InputError(f"{d} is not a model directory (manifest.json missing)")
    manifest = json.loads((d / "manifest.json").read_text())
    models = [load_model(d / f) for f in manifest["files"]]
    _, arrays = read_arrays(d / "rbm.bin")
    rbm = RbmParams(**{k: arrays[k].astype(np.float64) for k in ("W", "U", "r", "s", "t")})
    return HybridModel(models, rbm, manifest.get("metadata", {}))
