"""Named-tensor checkpoint archive.

Layout (all integers little-endian)::

    bytes 0-7    magic b"TSRCKPT\\x00"
    bytes 8-11   uint32 format version
    bytes 12-19  uint64 header length N
    next N bytes UTF-8 JSON header (:class:`CheckpointHeader`)
    remainder    raw little-endian tensor payload, tensors back to back in
                 header order; each entry records its byte offset from the
                 start of the payload, its dtype and its shape

The header also carries free-form provenance metadata (stage name, parents,
seed, config digest, package version). Writing is deterministic: the same
tensors and metadata always give the same bytes.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError

from .errors import CheckpointError

MAGIC = b"TSRCKPT\x00"
FORMAT_VERSION = 1

_DTYPES: Dict[str, Tuple[torch.dtype, str]] = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "bool": (torch.bool, "|b1"),
}
_BY_TORCH = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


class TensorEntry(BaseModel):
    """Location and type of one tensor in the payload."""

    name: str = Field(..., description="Tensor name")
    dtype: str = Field(..., description="Element type")
    shape: List[int] = Field(..., description="Tensor shape")
    offset: int = Field(..., ge=0, description="Byte offset inside the payload")
    nbytes: int = Field(..., ge=0, description="Byte length")


class CheckpointHeader(BaseModel):
    """JSON header of a checkpoint archive."""

    version: int = Field(FORMAT_VERSION, description="Archive format version")
    tensors: List[TensorEntry] = Field(default_factory=list, description="Payload index")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Provenance metadata")


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, torch.Tensor],
    metadata: Optional[Mapping[str, Any]] = None,
) -> Path:
    """Write ``tensors`` and ``metadata`` to ``path``.

    Args:
        path: Destination file; parent directories are created
        tensors: Named tensors, typically a ``state_dict``
        metadata: JSON-serialisable provenance

    Returns:
        The written path
    """
    path = Path(path)
    entries: List[TensorEntry] = []
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        if tensor.dtype not in _BY_TORCH:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for tensor {name}")
        dtype_name = _BY_TORCH[tensor.dtype]
        payload = tensor.numpy().astype(_DTYPES[dtype_name][1], copy=False).tobytes()
        entries.append(
            TensorEntry(
                name=name,
                dtype=dtype_name,
                shape=list(tensor.shape),
                offset=offset,
                nbytes=len(payload),
            )
        )
        chunks.append(payload)
        offset += len(payload)
    header = CheckpointHeader(tensors=entries, metadata=dict(metadata or {}))
    header_bytes = json.dumps(
        header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        for chunk in chunks:
            handle.write(chunk)
    tmp.replace(path)
    return path


def read_header(path: Union[str, Path]) -> CheckpointHeader:
    """Read only the JSON header of a checkpoint."""
    header, _ = _read(Path(path), with_payload=False)
    return header


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], CheckpointHeader]:
    """Read a checkpoint archive.

    Returns:
        (named tensors, header)

    Raises:
        CheckpointError: If the file is missing, truncated or of another format
    """
    header, payload = _read(Path(path), with_payload=True)
    tensors: Dict[str, torch.Tensor] = {}
    for entry in header.tensors:
        torch_dtype, np_dtype = _DTYPES[entry.dtype]
        raw = payload[entry.offset : entry.offset + entry.nbytes]
        if len(raw) != entry.nbytes:
            raise CheckpointError(f"{path}: payload truncated at tensor {entry.name}")
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry.shape)
        tensors[entry.name] = torch.from_numpy(array.copy()).to(torch_dtype)
    return tensors, header


def _read(path: Path, with_payload: bool) -> Tuple[CheckpointHeader, bytes]:
    try:
        with open(path, "rb") as handle:
            if handle.read(len(MAGIC)) != MAGIC:
                raise CheckpointError(f"{path} is not a pytsr checkpoint")
            (version,) = struct.unpack("<I", handle.read(4))
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            (length,) = struct.unpack("<Q", handle.read(8))
            header = CheckpointHeader.model_validate_json(handle.read(length))
            payload = handle.read() if with_payload else b""
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}", code="missing_checkpoint") from e
    except (struct.error, ValidationError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {e}") from e
    return header, payload
