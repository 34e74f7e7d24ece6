"""
This module contains routines for saving tensors (weights,
cache snapshots) and analysis results (CSV tables, JSON
reports) to the disk and reading them back.

Tensor files have the layout

    <uint64 little-endian header length>
    <UTF-8 JSON header>
    <float64 little-endian payload>

where the header is

    {"format": "tpamodels-tensors", "version": 1,
     "meta": {...},
     "tensors": [{"name", "shape", "offset"}, ...]}

and offsets are counted in bytes from the start of the
payload. A tensor entry may carry "alias_of" instead of an
offset; it then shares the data of the named tensor.
"""

import csv
import json
import logging
import os
import struct
import sys

import numpy as np

from .errors import SerializationError

logger = logging.getLogger(__name__)

TENSOR_FORMAT = 'tpamodels-tensors'
TENSOR_VERSION = 1

OUTPUT_DIR_ENV = 'TPA_OUTPUT_DIR'

_DTYPE = np.dtype('<f8')


def resolve_output_path(path):
    """
    Place a relative output path inside the directory named
    by the TPA_OUTPUT_DIR environment variable, if set.
    Absolute paths and '-' (stdout) are returned unchanged.
    """
    if path is None or path == '-' or os.path.isabs(path):
        return path
    outdir = os.environ.get(OUTPUT_DIR_ENV)
    if outdir:
        if not os.path.isdir(outdir):
            os.makedirs(outdir)
        return os.path.join(outdir, path)
    return path


def save_tensors(path, tensors, meta=None, aliases=None):
    """
    Save a dictionary of arrays in the binary tensor format.

    Parameters:
    -----------

    path: str
        Destination file.

    tensors: dict
        {name: ndarray}. Arrays are stored as float64.

    meta: dict, optional
        JSON-serialisable metadata stored in the header.

    aliases: dict, optional
        {alias_name: target_name}; alias_name is recorded in
        the header without a payload of its own.
    """
    aliases = aliases or {}
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        if name in aliases:
            continue
        data = np.ascontiguousarray(array, dtype=_DTYPE)
        entries.append({'name': name, 'shape': list(data.shape),
                        'offset': offset})
        chunks.append(data.tobytes(order='C'))
        offset += data.nbytes
    for alias, target in aliases.items():
        if target not in tensors or target in aliases:
            raise SerializationError(f'alias {alias} points to '
                                     f'unknown tensor {target}')
        entries.append({'name': alias,
                        'shape': list(np.shape(tensors[target])),
                        'alias_of': target})

    header = json.dumps({'format': TENSOR_FORMAT,
                         'version': TENSOR_VERSION,
                         'meta': meta or {},
                         'tensors': entries},
                        sort_keys=True).encode('utf-8')

    with open(path, 'wb') as f:
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.debug('saved %d tensors (%d payload bytes) to %s',
                 len(entries), offset, path)


def load_tensors(path):
    """
    Load a file written by save_tensors.

    Returns:
    --------

    tensors: dict
        {name: ndarray}; aliased names map to the very same
        array object as their target.

    meta: dict
        The metadata stored in the header.

    Raises:
    -------
    SerializationError: on a truncated file, an unknown format
        or version, or inconsistent tensor entries.
    """
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < 8:
        raise SerializationError(f'{path}: file too short')
    (hlen,) = struct.unpack('<Q', raw[:8])
    if 8 + hlen > len(raw):
        raise SerializationError(f'{path}: truncated header')
    try:
        header = json.loads(raw[8:8 + hlen].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f'{path}: unreadable header') from exc
    if header.get('format') != TENSOR_FORMAT:
        raise SerializationError(f'{path}: not a tensor file')
    if header.get('version') != TENSOR_VERSION:
        raise SerializationError(('{}: unsupported version {}'
                                  ).format(path, header.get('version')))

    payload = raw[8 + hlen:]
    tensors = {}
    aliases = {}
    for entry in header['tensors']:
        name = entry['name']
        shape = tuple(entry['shape'])
        if 'alias_of' in entry:
            aliases[name] = entry['alias_of']
            continue
        count = int(np.prod(shape, dtype=np.int64))
        start = entry['offset']
        stop = start + count * _DTYPE.itemsize
        if stop > len(payload):
            raise SerializationError(f'{path}: tensor {name} truncated')
        tensors[name] = np.frombuffer(payload[start:stop], dtype=_DTYPE
                                      ).reshape(shape).astype(np.float64)
    for alias, target in aliases.items():
        if target not in tensors:
            raise SerializationError(f'{path}: dangling alias {alias}')
        tensors[alias] = tensors[target]
    return tensors, header.get('meta', {})


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def save_csv(path, columns, rows):
    """
    Write rows (dicts or sequences) as CSV with a header
    line and a fixed column order. path == '-' writes to
    stdout.
    """
    def _write(handle):
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row[col] for col in columns]
            writer.writerow([_fmt(value) for value in row])

    if path == '-':
        _write(sys.stdout)
    else:
        with open(path, 'w', newline='') as f:
            _write(f)


def read_csv(path):
    """Read a CSV file written by save_csv into a list of dicts."""
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def save_json(path, report):
    """Write a JSON report with sorted keys."""
    with open(path, 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write('\n')
