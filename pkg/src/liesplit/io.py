"""On-disk formats: datasets, checkpoints, reports and PNG exports.

Dataset directory
    ``manifest.json`` plus one ``seq_NNNNN.f32`` per sequence: raw IEEE-754
    float32, little-endian, row-major ``[T, H, W]``.

Checkpoint file
    ``b"LSCKPT\\x00\\x01"`` magic, a little-endian uint64 header length, a
    UTF-8 JSON header, then one contiguous blob. The header's ``tensors``
    table gives ``name``, ``dtype``, ``shape``, ``offset`` and ``nbytes`` (in
    bytes from the blob start) for every stored array; all arrays are
    little-endian, row-major.

All files are written to a temporary name and renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .datagen import GENERATOR_VERSION, Geometry, Sequence, SequenceSpec
from .encoder import EncoderConfig
from .trainer import ModelState, TrainConfig, new_state

DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"LSCKPT\x00\x01"
MANIFEST_NAME = "manifest.json"

_NP_DTYPES = {"float32": "<f4", "float64": "<f8"}
_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class FormatError(ValueError):
    """A file does not match the expected layout or version."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


# -- datasets --------------------------------------------------------------

def frame_file_name(index: int) -> str:
    return f"seq_{index:05d}.f32"


def save_dataset(out_dir, seqs: List[Sequence], meta: Optional[dict] = None) -> dict:
    out_dir = Path(out_dir)
    if not seqs:
        raise ValueError("empty dataset")
    geom = seqs[0].truth.geometry
    entries = []
    for i, seq in enumerate(seqs):
        raw = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
        name = frame_file_name(i)
        atomic_write(out_dir / name, raw)
        t = seq.truth
        entries.append({
            "id": i,
            "seed": t.seed,
            "frame_file": name,
            "byte_length": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
            "truth": {
                "evaluation_only": True,
                "rotation_deg": t.rotation_deg,
                "dx": t.dx,
                "dy": t.dy,
                "initial_pose": {"center": list(t.center), "angle_deg": t.angle0_deg},
                "texture": [list(p) for p in t.texture],
            },
        })
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": seqs[0].truth.kind,
        "frames": geom.frames,
        "height": geom.image_size,
        "width": geom.image_size,
        "channels": 1,
        "dtype": "float32-le",
        "layout": "[T, H, W] row-major",
        "generator": GENERATOR_VERSION,
        "geometry": asdict(geom),
        "sequences": entries,
    }
    if meta:
        manifest["meta"] = meta
    atomic_write(out_dir / MANIFEST_NAME, _dumps(manifest))
    return manifest


def load_dataset(data_dir, verify: bool = True) -> Tuple[List[Sequence], dict]:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"unsupported dataset format version {manifest.get('format_version')!r} "
            f"(expected {DATASET_FORMAT_VERSION})"
        )
    g = dict(manifest["geometry"])
    geom = Geometry(**{k: tuple(v) if isinstance(v, list) else v for k, v in g.items()})
    shape = (manifest["frames"], manifest["height"], manifest["width"])
    seqs = []
    for e in manifest["sequences"]:
        raw = (data_dir / e["frame_file"]).read_bytes()
        if len(raw) != e["byte_length"]:
            raise FormatError(f"{e['frame_file']}: {len(raw)} bytes, manifest says {e['byte_length']}")
        if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise FormatError(f"{e['frame_file']}: checksum mismatch")
        frames = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        t = e["truth"]
        spec = SequenceSpec(
            kind=manifest["kind"], rotation_deg=t["rotation_deg"], dx=t["dx"], dy=t["dy"],
            seed=e["seed"], center=tuple(t["initial_pose"]["center"]),
            angle0_deg=t["initial_pose"]["angle_deg"],
            texture=tuple(tuple(p) for p in t["texture"]), geometry=geom,
        )
        seqs.append(Sequence(frames, spec))
    return seqs, manifest


# -- checkpoints -----------------------------------------------------------

def _state_arrays(state: ModelState) -> Dict[str, torch.Tensor]:
    arrays = {}
    for p in state.registry:
        arrays[f"param/{p.name}"] = p.value.detach()
        if p.exp_avg is not None:
            arrays[f"exp_avg/{p.name}"] = p.exp_avg
            arrays[f"exp_avg_sq/{p.name}"] = p.exp_avg_sq
    return arrays


def checkpoint_bytes(state: ModelState, config: TrainConfig, extra: Optional[dict] = None) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, t in _state_arrays(state).items():
        dtype = str(t.dtype).replace("torch.", "")
        raw = np.ascontiguousarray(t.cpu().numpy(), dtype=_NP_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "init_steps_done": state.init_steps_done,
        "main_steps_done": state.main_steps_done,
        "config": config.to_dict(),
        "encoder_config": asdict(state.encoder.config),
        "extra": extra or {},
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + len(hbytes).to_bytes(8, "little") + hbytes + b"".join(chunks)


def save_checkpoint(path, state: ModelState, config: TrainConfig, extra: Optional[dict] = None) -> None:
    atomic_write(path, checkpoint_bytes(state, config, extra))


def read_checkpoint_header(path) -> Tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC[:6]):
        raise FormatError(f"{path}: not a checkpoint file")
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: unsupported checkpoint container version")
    n = int.from_bytes(data[8:16], "little")
    header = json.loads(data[16:16 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint format version {header.get('format_version')!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return header, data[16 + n:]


def load_checkpoint(path) -> Tuple[ModelState, TrainConfig, dict]:
    header, blob = read_checkpoint_header(path)
    config = TrainConfig.from_dict(header["config"])
    ec = dict(header["encoder_config"])
    ec["channels"] = tuple(ec["channels"])
    state = new_state(config, EncoderConfig(**ec))
    arrays = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_NP_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        arrays[e["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPES[e["dtype"]])
    names = state.registry.names()
    present = {k.split("/", 1)[1] for k in arrays if k.startswith("param/")}
    if present != set(names):
        raise FormatError(f"{path}: parameter set mismatch ({sorted(set(names) ^ present)})")
    state.registry.load_values({n: arrays[f"param/{n}"] for n in names})
    for p in state.registry:
        if f"exp_avg/{p.name}" in arrays:
            p.exp_avg = arrays[f"exp_avg/{p.name}"]
            p.exp_avg_sq = arrays[f"exp_avg_sq/{p.name}"]
    state.init_steps_done = header["init_steps_done"]
    state.main_steps_done = header["main_steps_done"]
    return state, config, header


# -- reports and images ----------------------------------------------------

def save_report(path, report: dict) -> None:
    atomic_write(path, _dumps(report))


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(C, H, W)`` or ``(H, W)`` floats in [0, 1] -> ``(H, W[, 3])`` uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def append_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
