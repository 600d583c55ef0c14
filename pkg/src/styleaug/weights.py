"""Named-tensor weight archives.

An archive is a directory (or ``.zip``) holding one raw little-endian
float32 file per tensor plus two JSON files:

``manifest.json``  maps tensor name -> {"shape", "dtype", "file"}
``meta.json``      free-form metadata (architecture profile, embedding
                   dim, format version)

Round trips are bit-exact: save -> load -> save reproduces identical
bytes.  All load failures raise :class:`WeightArchiveError` naming the
offending tensor where one can be identified.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import WeightArchiveError

FORMAT_VERSION = 1

_FIXED_ZIP_DATE = (1980, 1, 1, 0, 0, 0)  # keeps zip archives byte-reproducible


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def save_weight_archive(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Write tensors to ``path`` (a directory, or a zip if it ends in .zip)."""
    entries = {}
    blobs = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        fname = name + ".bin"
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "file": fname}
        blobs[fname] = arr.tobytes()
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries}
    meta = dict(meta or {})
    meta.setdefault("format_version", FORMAT_VERSION)

    path = Path(path)
    if path.suffix == ".zip":
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            names = ["manifest.json", "meta.json"] + sorted(blobs)
            payload = {
                "manifest.json": _dump_json(manifest),
                "meta.json": _dump_json(meta),
                **blobs,
            }
            for name in names:
                info = zipfile.ZipInfo(name, date_time=_FIXED_ZIP_DATE)
                zf.writestr(info, payload[name])
    else:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_bytes(_dump_json(manifest))
        (path / "meta.json").write_bytes(_dump_json(meta))
        for fname, blob in blobs.items():
            (path / fname).write_bytes(blob)


def _read_archive_files(path: Path) -> dict[str, bytes]:
    if path.suffix == ".zip":
        try:
            with zipfile.ZipFile(path) as zf:
                return {name: zf.read(name) for name in zf.namelist()}
        except zipfile.BadZipFile as exc:
            raise WeightArchiveError(f"{path} is not a valid zip archive") from exc
    files = {}
    for p in path.rglob("*"):
        if p.is_file():
            files[p.relative_to(path).as_posix()] = p.read_bytes()
    return files


def load_weight_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive back as ``(tensors, meta)``."""
    path = Path(path)
    if not path.exists():
        raise WeightArchiveError(f"weight archive {path} does not exist")
    files = _read_archive_files(path)
    if "manifest.json" not in files:
        raise WeightArchiveError(f"{path} has no manifest.json")
    try:
        manifest = json.loads(files["manifest.json"])
    except json.JSONDecodeError as exc:
        raise WeightArchiveError(f"{path}: manifest.json is not valid JSON: {exc}") from exc
    meta = {}
    if "meta.json" in files:
        try:
            meta = json.loads(files["meta.json"])
        except json.JSONDecodeError as exc:
            raise WeightArchiveError(f"{path}: meta.json is not valid JSON: {exc}") from exc

    entries = manifest.get("tensors")
    if not isinstance(entries, dict):
        raise WeightArchiveError(f"{path}: manifest.json lacks a 'tensors' mapping")

    tensors: dict[str, np.ndarray] = {}
    for name, entry in entries.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            dtype = entry["dtype"]
            fname = entry["file"]
        except (KeyError, TypeError, ValueError) as exc:
            raise WeightArchiveError(
                f"{path}: manifest entry for tensor '{name}' is malformed: {exc!r}"
            ) from exc
        if dtype != "float32":
            raise WeightArchiveError(
                f"{path}: tensor '{name}' has unsupported dtype '{dtype}'"
            )
        if fname not in files:
            raise WeightArchiveError(f"{path}: tensor '{name}': file '{fname}' is missing")
        blob = files[fname]
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(blob) != expected:
            raise WeightArchiveError(
                f"{path}: tensor '{name}': expected {expected} bytes, found {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        if not np.all(np.isfinite(arr)):
            raise WeightArchiveError(f"{path}: tensor '{name}' contains non-finite values")
        tensors[name] = arr
    return tensors, meta


# ---------------------------------------------------------------------------
# torch interop
# ---------------------------------------------------------------------------

def state_dict_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_arrays_into_module(
    module: torch.nn.Module, tensors: dict[str, np.ndarray], archive_name: str = "archive"
) -> None:
    """Copy named arrays into a module, checking names and shapes."""
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise WeightArchiveError(f"{archive_name}: tensor '{missing[0]}' is missing")
    unexpected = sorted(set(tensors) - set(state))
    if unexpected:
        raise WeightArchiveError(
            f"{archive_name}: tensor '{unexpected[0]}' does not belong to this network"
        )
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise WeightArchiveError(
                f"{archive_name}: tensor '{name}' has shape {tuple(arr.shape)}, "
                f"expected {tuple(state[name].shape)}"
            )
    module.load_state_dict(
        {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    )
