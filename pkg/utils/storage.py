#!/usr/bin/env python3
"""
File storage for blockprune models, gradient stashes and reports

Model container (``.bpmodel``):

    8 bytes   magic ``BPRUNE01``
    8 bytes   little-endian header length H
    H bytes   UTF-8 JSON header {format, version, config, block_shape, meta,
              tensors: [{name, rows, cols, offset}]}
    padding   to the next 64-byte boundary (start of the payload region)
    payloads  little-endian float32, row-major, each 64-byte aligned;
              ``offset`` is relative to the payload region
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from pruning.errors import ContainerFormatError, NonFiniteError
from pruning.model import ParamSet, ToyViTConfig, layer_dims
from pruning.tensor import BlockShape
from utils.logger import get_logger

logger = get_logger('storage')

MAGIC = b'BPRUNE01'
ALIGN = 64
FORMAT_VERSION = 1
_LEN = struct.Struct('<Q')


def _aligned(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _dumps(data: Dict[str, Any], indent: Optional[int] = None) -> str:
    try:
        return json.dumps(data, sort_keys=True, indent=indent, allow_nan=False)
    except ValueError as exc:
        raise NonFiniteError(f"refusing to write non-finite value: {exc}") from exc


class ModelStore:
    """Reads and writes everything a blockprune run puts on disk"""

    def __init__(self, storage_dir: str = "runs"):
        self.storage_dir = Path(storage_dir)
        self.storage_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.storage_dir / name

    # ---- raw container -------------------------------------------------

    def write_container(self, path, header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> Path:
        """Write tensors (2-D, or 1-D stored as one row) with ``header`` fields"""
        path = Path(path)
        manifest = []
        payloads = []
        offset = 0
        for name, array in tensors.items():
            a = np.asarray(array)
            if a.ndim == 1:
                a = a.reshape(1, -1)
            if a.ndim != 2:
                raise ContainerFormatError(f"{name}: only 1-D and 2-D tensors can be stored, got {a.shape}")
            if not np.isfinite(a).all():
                raise NonFiniteError(f"{name}: refusing to store non-finite values")
            data = np.ascontiguousarray(a, dtype='<f4').tobytes()
            manifest.append({'name': name, 'rows': int(a.shape[0]), 'cols': int(a.shape[1]), 'offset': offset})
            payloads.append((offset, data))
            offset = _aligned(offset + len(data))

        full_header = dict(header)
        full_header.update({'format': 'bpmodel', 'version': FORMAT_VERSION, 'tensors': manifest})
        header_bytes = _dumps(full_header).encode('utf-8')
        base = _aligned(len(MAGIC) + _LEN.size + len(header_bytes))

        buf = bytearray(base + offset)
        buf[:len(MAGIC)] = MAGIC
        buf[len(MAGIC):len(MAGIC) + _LEN.size] = _LEN.pack(len(header_bytes))
        buf[len(MAGIC) + _LEN.size:len(MAGIC) + _LEN.size + len(header_bytes)] = header_bytes
        for off, data in payloads:
            buf[base + off:base + off + len(data)] = data

        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(buf))
        logger.debug(f"wrote {path} ({len(manifest)} tensors, {len(buf)} bytes)")
        return path

    def read_container(self, path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
        path = Path(path)
        if not path.exists():
            raise ContainerFormatError(f"{path}: no such model file")
        raw = path.read_bytes()
        head = len(MAGIC) + _LEN.size
        if len(raw) < head or raw[:len(MAGIC)] != MAGIC:
            raise ContainerFormatError(f"{path}: not a .bpmodel file (bad magic)")
        (hlen,) = _LEN.unpack_from(raw, len(MAGIC))
        if head + hlen > len(raw):
            raise ContainerFormatError(f"{path}: header length {hlen} runs past end of file")
        try:
            header = json.loads(raw[head:head + hlen].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerFormatError(f"{path}: header is not valid UTF-8 JSON") from exc
        if header.get('format') != 'bpmodel' or header.get('version') != FORMAT_VERSION:
            raise ContainerFormatError(f"{path}: unsupported format {header.get('format')!r} "
                                       f"version {header.get('version')!r}")

        base = _aligned(head + hlen)
        tensors = {}
        for entry in header.get('tensors', []):
            try:
                name, rows, cols, offset = entry['name'], int(entry['rows']), int(entry['cols']), int(entry['offset'])
            except (KeyError, TypeError, ValueError) as exc:
                raise ContainerFormatError(f"{path}: malformed manifest entry {entry!r}") from exc
            nbytes = rows * cols * 4
            if offset % ALIGN or rows < 0 or cols < 0 or base + offset + nbytes > len(raw):
                raise ContainerFormatError(f"{path}: tensor {name} extent is out of bounds or misaligned")
            arr = np.frombuffer(raw, dtype='<f4', count=rows * cols, offset=base + offset)
            arr = arr.reshape(rows, cols).astype(np.float32)
            if not np.isfinite(arr).all():
                raise ContainerFormatError(f"{path}: tensor {name} holds non-finite values")
            tensors[name] = arr
        return header, tensors

    # ---- models --------------------------------------------------------

    def save_model(self, path, params: ParamSet, block_shape: Optional[BlockShape] = None,
                   meta: Optional[Dict[str, Any]] = None) -> Path:
        header = {
            'config': params.config.to_dict(),
            'block_shape': str(block_shape) if block_shape else None,
            'meta': meta or {},
        }
        return self.write_container(path, header, params.tensors())

    def load_model(self, path) -> Tuple[ParamSet, Optional[BlockShape], Dict[str, Any]]:
        header, tensors = self.read_container(path)
        if 'config' not in header:
            raise ContainerFormatError(f"{path}: container has no model config")
        try:
            config = ToyViTConfig.from_dict(header['config'])
        except TypeError as exc:
            raise ContainerFormatError(f"{path}: bad model config in header") from exc
        params = ParamSet.from_tensors(config, tensors)
        shape = BlockShape.parse(header['block_shape']) if header.get('block_shape') else None
        return params, shape, header.get('meta', {})

    def save_grad_stash(self, path, config: ToyViTConfig, grads: Dict[str, np.ndarray]) -> Path:
        """Per-sample weight gradients as ``grad.{layer_id}.{sample}`` tensors"""
        dims = layer_dims(config)
        tensors = {}
        for lid, stash in grads.items():
            for i, row in enumerate(stash):
                tensors[f'grad.{lid}.{i}'] = np.asarray(row).reshape(dims[lid])
        return self.write_container(path, {'config': config.to_dict(), 'kind': 'grad_stash'}, tensors)

    def load_grad_stash(self, path) -> Dict[str, np.ndarray]:
        header, tensors = self.read_container(path)
        if header.get('kind') != 'grad_stash':
            raise ContainerFormatError(f"{path}: not a gradient stash")
        rows: Dict[str, Dict[int, np.ndarray]] = {}
        for name, arr in tensors.items():
            _, rest = name.split('.', 1)
            lid, idx = rest.rsplit('.', 1)
            rows.setdefault(lid, {})[int(idx)] = arr.reshape(-1)
        return {lid: np.stack([per[i] for i in sorted(per)]).astype(np.float64) for lid, per in rows.items()}

    # ---- reports -------------------------------------------------------

    def save_report(self, path, data: Dict[str, Any], format_name: str) -> Path:
        """JSON with sorted keys and a timestamp-free ``_metadata`` block"""
        path = Path(path)
        payload = dict(data)
        payload['_metadata'] = {'format': format_name, 'version': FORMAT_VERSION}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dumps(payload, indent=2) + '\n', encoding='utf-8')
        return path

    def load_report(self, path, format_name: Optional[str] = None) -> Dict[str, Any]:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as exc:
            raise ContainerFormatError(f"{path}: cannot read report") from exc
        meta = data.pop('_metadata', {})
        if format_name and meta.get('format') != format_name:
            raise ContainerFormatError(f"{path}: expected a {format_name} report, found {meta.get('format')!r}")
        return data

    def save_table(self, path, frame: pd.DataFrame) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator='\n')
        return path

    def load_table(self, path) -> pd.DataFrame:
        return pd.read_csv(path)
