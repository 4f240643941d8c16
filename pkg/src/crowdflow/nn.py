"""Parameter blocks, small layers and the flat-blob checkpoint format."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor, concat, matmul, tanh

Params = dict  # name -> Tensor (leaf, requires_grad=True)

BLOB_FORMAT = "crowdflow-params"
BLOB_VERSION = 1


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def init_linear(params: Params, name: str, n_in: int, n_out: int,
                rng: np.random.Generator, bias: bool = True, gain: float = 1.0) -> None:
    bound = gain * np.sqrt(6.0 / (n_in + n_out))
    params[f"{name}.W"] = param(rng.uniform(-bound, bound, size=(n_in, n_out)))
    if bias:
        params[f"{name}.b"] = param(np.zeros(n_out))


def linear(params: Params, name: str, x):
    out = matmul(x, params[f"{name}.W"])
    b = params.get(f"{name}.b")
    return out if b is None else out + b


def init_mlp2(params: Params, name: str, n_in: int, hidden: int, n_out: int,
              rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.0", n_in, hidden, rng)
    init_linear(params, f"{name}.1", hidden, n_out, rng)


def mlp2(params: Params, name: str, x):
    """Two-layer perceptron with a tanh hidden layer."""
    return linear(params, f"{name}.1", tanh(linear(params, f"{name}.0", x)))


def cat(*xs, axis: int = -1):
    return concat(xs, axis=axis)


def arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def from_arrays(arrs: Mapping[str, np.ndarray]) -> Params:
    return {k: param(v) for k, v in arrs.items()}


def clone(params: Params) -> Params:
    return {k: param(v.data.copy()) for k, v in params.items()}


def zero_grad(params: Params) -> None:
    for p in params.values():
        p.grad = None


def grads(params: Params) -> dict[str, np.ndarray]:
    return {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in params.items()}


def n_params(params: Params) -> int:
    return int(sum(v.data.size for v in params.values()))


def save_blob(prefix: str | Path, arrs: Mapping[str, np.ndarray], meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (little-endian float64, concatenated) and ``<prefix>.json``."""
    prefix = Path(prefix)
    blocks, offset, chunks = [], 0, []
    for name in sorted(arrs):
        a = np.ascontiguousarray(arrs[name], dtype="<f8")
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel().tobytes())
    manifest = {"format": BLOB_FORMAT, "version": BLOB_VERSION, "dtype": "float64-le",
                "n_values": offset, "blocks": blocks, "meta": meta or {}}
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path, json_path


def load_blob(prefix: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != BLOB_FORMAT:
        raise ValueError(f"{prefix}: not a {BLOB_FORMAT} manifest")
    if manifest.get("version") != BLOB_VERSION:
        raise ValueError(f"{prefix}: unsupported version {manifest.get('version')}")
    flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != manifest["n_values"]:
        raise ValueError(f"{prefix}: blob has {flat.size} values, manifest says {manifest['n_values']}")
    out = {}
    for blk in manifest["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        out[blk["name"]] = flat[blk["offset"]:blk["offset"] + n].reshape(blk["shape"]).astype(np.float64)
    return out, manifest["meta"]
