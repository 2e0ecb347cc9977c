"""Single-file checkpoints: a text manifest followed by a float32 blob.

Layout::

    CASCADE-MAE-CKPT 1
    <key>=<value>                      metadata (geometry, dims, ...)
    param <name> <d0,d1,...> <offset> <nbytes>
    ...
    end
    <little-endian float32 sections, one per parameter, at the listed offsets>

Offsets are relative to the first byte after the ``end`` line.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .data import Geometry
from .layers import ParamStore
from .mae import MaeConfig, MaeParams

MAGIC = "CASCADE-MAE-CKPT"
VERSION = 1


def write_params(path, params: ParamStore, meta: dict[str, object]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {VERSION}"]
    for k, v in meta.items():
        if "\n" in f"{k}{v}" or "=" in k:
            raise ValueError(f"bad metadata entry {k!r}")
        lines.append(f"{k}={v}")
    blob = io.BytesIO()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape} {blob.tell()} {arr.nbytes}")
        blob.write(arr.tobytes())
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(blob.getvalue())
    return path


def read_params(path) -> tuple[ParamStore, dict[str, str]]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\nend\n")
    if not sep:
        raise ValueError(f"{path}: missing manifest terminator")
    lines = head.decode("utf-8").split("\n")
    magic = lines[0].split()
    if magic != [MAGIC, str(VERSION)]:
        raise ValueError(f"{path}: not a version-{VERSION} checkpoint")
    meta, params = {}, {}
    for line in lines[1:]:
        if line.startswith("param "):
            _, name, shape, off, nbytes = line.split()
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
            off, nbytes = int(off), int(nbytes)
            if off + nbytes > len(body):
                raise ValueError(f"{path}: section {name} runs past end of file")
            arr = np.frombuffer(body[off:off + nbytes], dtype="<f4").reshape(dims)
            params[name] = arr.astype(np.float32)
        else:
            k, _, v = line.partition("=")
            meta[k] = v
    return params, meta


def config_meta(cfg: MaeConfig) -> dict[str, object]:
    g = cfg.geometry
    return {
        "height": g.height, "width": g.width, "patch": g.patch, "channels": g.channels,
        "d_enc": cfg.d_enc, "d_dec": cfg.d_dec, "enc_heads": cfg.enc_heads,
        "dec_heads": cfg.dec_heads, "mlp_ratio": cfg.mlp_ratio, "depth": cfg.depth,
    }


def config_from_meta(meta: dict[str, str]) -> MaeConfig:
    i = {k: int(v) for k, v in meta.items() if k in config_meta(MaeConfig())}
    geom = Geometry(i["height"], i["width"], i["patch"], i["channels"])
    return MaeConfig(geom, i["d_enc"], i["d_dec"], i["enc_heads"], i["dec_heads"],
                     i["mlp_ratio"], i["depth"])


def save_mae(path, mae: MaeParams, **extra) -> Path:
    return write_params(path, mae.params, {"kind": "mae", **config_meta(mae.config), **extra})


def load_mae(path) -> MaeParams:
    params, meta = read_params(path)
    if meta.get("kind") != "mae":
        raise ValueError(f"{path}: not an MAE checkpoint (kind={meta.get('kind')})")
    return MaeParams(config_from_meta(meta), params)
