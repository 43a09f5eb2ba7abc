"""Binary checkpoint format.

Layout: magic "LFCP", u32 format version, u32 header length, JSON header,
raw payload. The header carries the creation step, phase, config hash, and
a manifest of named tensors (name, shape, dtype, byte offset into the
payload, byte count). Arrays are little-endian float64, contiguous,
row-major; offsets are non-overlapping and exhaustive, and save/load round
trips are bit-identical. Optimizer moments ride along under "opt." names
so resumed runs continue exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .params import Adam, Parameters

MAGIC = b"LFCP"
FORMAT_VERSION = 1
DTYPE_TAG = "<f8"


def _manifest_arrays(params: Parameters, optimizer: Adam | None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {n: t.data for n, t in params.items()}
    if optimizer is not None:
        for n, a in optimizer.m.items():
            arrays[f"opt.m.{n}"] = a
        for n, a in optimizer.v.items():
            arrays[f"opt.v.{n}"] = a
        arrays["opt.t"] = np.array(float(optimizer.t))
    return arrays


def save_checkpoint(
    path: str,
    params: Parameters,
    step: int,
    phase: str,
    config_hash: str,
    optimizer: Adam | None = None,
) -> None:
    arrays = _manifest_arrays(params, optimizer)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=DTYPE_TAG).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": DTYPE_TAG,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "phase": phase,
        "config_hash": config_hash,
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


class CheckpointError(RuntimeError):
    pass


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len))
        payload = f.read()
    arrays: dict[str, np.ndarray] = {}
    seen_bytes = 0
    for ent in header["manifest"]:
        lo, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(payload[lo : lo + n], dtype=ent["dtype"]).reshape(ent["shape"])
        arrays[ent["name"]] = arr.astype(np.float64).copy()
        seen_bytes += n
    if seen_bytes != len(payload):
        raise CheckpointError("manifest does not cover the payload exactly")
    return header, arrays


def load_checkpoint(
    path: str,
    params: Parameters,
    optimizer: Adam | None = None,
    expect_config_hash: str | None = None,
) -> dict:
    """Restore parameters (and optimizer moments when given) in place.

    A config-hash mismatch warns loudly but proceeds, since evaluating a
    checkpoint under a modified eval config is legitimate.
    """
    header, arrays = read_checkpoint(path)
    if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
        import sys

        print(
            f"WARNING: checkpoint {path} was written under config hash "
            f"{header['config_hash']}, current is {expect_config_hash}",
            file=sys.stderr,
        )
    param_state = {n: a for n, a in arrays.items() if not n.startswith("opt.")}
    params.load_state_dict(param_state)
    if optimizer is not None:
        if "opt.t" not in arrays:
            raise CheckpointError(f"{path} carries no optimizer state to resume from")
        optimizer.load_state_dict(
            {
                "t": int(arrays["opt.t"]),
                "m": {n: arrays[f"opt.m.{n}"] for n in optimizer.m},
                "v": {n: arrays[f"opt.v.{n}"] for n in optimizer.v},
            }
        )
    return header
