"""Binary tensor containers for checkpoints and datasets.

Layout: 8-byte magic ``KKLCKPT1`` | uint64 little-endian header length |
UTF-8 JSON manifest | payload of concatenated float64 little-endian
row-major tensors in manifest order. The manifest carries the format
version, the kind (checkpoint or dataset), dimensions, the named tensor
table (name, shape, byte offset) and the embedded run config; loading then
saving reproduces the file byte-identically (canonical JSON, sorted tensor
names).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import networks as nets
from .observer import ModelBundle, ObserverMatrices

MAGIC = b"KKLCKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_container(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    names = sorted(tensors)
    table = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float64)
        blob = arr.astype("<f8", copy=False).tobytes()  # tobytes emits C order
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tensors": table,
        "payload_bytes": offset,
    }
    manifest.update(meta)
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r} (expected {MAGIC!r})")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header at offset {len(raw)}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated manifest at offset {len(raw)} (need {16 + hlen})")
    try:
        manifest = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from None
    payload = raw[16 + hlen:]
    expected = manifest.get("payload_bytes")
    if expected is not None and len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload length {len(payload)} != manifest {expected} "
            f"(corruption at offset {16 + hlen + min(len(payload), expected)})")
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(payload):
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} spans [{start}, {end}) beyond payload "
                f"({len(payload)} bytes)")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return manifest, tensors


# -- model bundles ----------------------------------------------------------------

def bundle_tensors(bundle: ModelBundle) -> dict[str, np.ndarray]:
    out = {}
    out.update(nets.mlp_params(bundle.encoder, "enc"))
    out.update(nets.mlp_params(bundle.decoder, "dec"))
    if bundle.injection is not None:
        out.update(nets.injection_params(bundle.injection))
    if bundle.hyper is not None:
        out.update(nets.hyper_params(bundle.hyper))
    out["obsmat.A"] = bundle.matrices.A
    out["obsmat.B"] = bundle.matrices.B
    return out


def save_checkpoint(path, bundle: ModelBundle, config: dict,
                    metrics_summary: dict | None = None) -> None:
    meta = {
        "system": bundle.system,
        "variant": bundle.variant,
        "dimensions": {
            "n_z": bundle.n_z,
            "omega": bundle.omega,
            "dt": bundle.dt,
            "enc_dims": bundle.encoder.dims,
            "dec_dims": bundle.decoder.dims,
            "rank": bundle.hyper.rank if bundle.hyper is not None else None,
        },
        "config": config,
        "metrics": metrics_summary or {},
    }
    save_container(path, "checkpoint", meta, bundle_tensors(bundle))


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    meta, tensors = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint (kind={meta.get('kind')!r})")
    dims = meta["dimensions"]
    n_enc = len(dims["enc_dims"]) - 1
    n_dec = len(dims["dec_dims"]) - 1
    enc = nets.mlp_from_params(tensors, "enc", n_enc)
    dec = nets.mlp_from_params(tensors, "dec", n_dec)
    variant = meta["variant"]
    inj = hyper = None
    if variant == "obs":
        inj = nets.injection_from_params(tensors)
    elif variant == "dyn":
        layer_dims = ([(W.shape[0], W.shape[1]) for W, _ in enc.layers]
                      + [(W.shape[0], W.shape[1]) for W, _ in dec.layers])
        hyper = nets.hyper_from_params(tensors, layer_dims, int(dims["rank"]))
    mats = ObserverMatrices(tensors["obsmat.A"], tensors["obsmat.B"])
    bundle = ModelBundle(variant, meta["system"], enc, dec, mats,
                         int(dims["omega"]), float(dims["dt"]),
                         injection=inj, hyper=hyper)
    return bundle, meta
