"""
Versioned checkpoint container.

Layout: ``MQCK`` magic, format version (uint32 LE), header length (uint64 LE), a UTF-8 JSON
header holding the metadata and the section table, then the sections back to back.
Every section is a ``.npy`` blob; offsets in the table are relative to the end of the header.
"""
import io
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .sectioned import SectionFile

logger = logging.getLogger(__package__)

MAGIC = b'MQCK'
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct('<4sIQ')


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def write_checkpoint(path: Union[str, Path], meta: dict, arrays: dict[str, np.ndarray]):
    """Write atomically: the container is assembled next to ``path`` and moved into place."""
    path = Path(path)
    blobs = [(name, _npy_bytes(arr)) for name, arr in sorted(arrays.items())]
    table, offset = [], 0
    for name, blob in blobs:
        table.append({'name': name, 'offset': offset, 'size': len(blob)})
        offset += len(blob)
    header = json.dumps({'meta': meta, 'sections': table}, sort_keys=True).encode('utf-8')
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for _, blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    logger.info(f"saved checkpoint '{path}' ({len(blobs)} sections)")


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    with open(path, 'rb') as f:
        preamble = f.read(_PREAMBLE.size)
        if len(preamble) != _PREAMBLE.size:
            raise ValueError(f"'{path}' is too short to be a checkpoint")
        magic, version, header_len = _PREAMBLE.unpack(preamble)
        if magic != MAGIC:
            raise ValueError(f"'{path}' is not a checkpoint (magic {magic!r})")
        if version > FORMAT_VERSION:
            raise ValueError(f"checkpoint format {version} is newer than supported ({FORMAT_VERSION})")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise ValueError(f"'{path}' has a truncated header")
        header = json.loads(raw_header.decode('utf-8'))
        sections = SectionFile.from_table(f, header['sections'], base_offset=_PREAMBLE.size + header_len)
        arrays = {}
        for name, section in sections.items():
            arrays[name] = np.load(section, allow_pickle=False)
            if section.tell() != section.size:
                raise ValueError(f"section '{name}' has {section.size - section.tell()} trailing bytes")
    return Checkpoint(header['meta'], arrays)
