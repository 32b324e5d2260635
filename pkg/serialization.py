"""
Packed deployment format for trained models (.bcnx).

Layout, all scalars little-endian:

    b"BCNX" | u16 version | u32 header_len | header JSON (UTF-8)
    | u64 payload_len | payload | u32 crc32(payload)

The header echoes the ModelSpec and lists every layer with its tensors.
Binary weights are stored as sign bits: for each plane (real, then
imaginary) C_out rows of prod(shape[1:]) bits, LSB-first, each row padded
to whole 64-bit words. Everything else is float32.
"""

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import pandas as pd

from bitpack import WORD_BITS, pack_bool_rows, unpack_bool_rows, word_count
from ctensor import ComplexTensor
from errors import FormatError
from models import ModelSpec, build_model, count_params

logger = logging.getLogger(__name__)

MAGIC = b'BCNX'
FORMAT_VERSION = 1
NORM_LAYERS = ('bn', 'cgbn', 'cbn')
BINARY_PLANES = {'binary_complex_conv': 2, 'binary_conv': 1}

_PREFIX = struct.Struct('<4sHI')
_PAYLOAD_LEN = struct.Struct('<Q')
_CRC = struct.Struct('<I')


@dataclass(frozen=True)
class TensorEntry:
    name: str
    kind: str                 # binary | float32
    shape: tuple
    planes: int = 1

    @property
    def rows(self):
        return self.shape[0]

    @property
    def row_bits(self):
        return int(np.prod(self.shape[1:]))

    @property
    def nbytes(self):
        if self.kind == 'binary':
            return self.planes * self.rows * word_count(self.row_bits) * WORD_BITS // 8
        return 4 * int(np.prod(self.shape))

    def to_dict(self):
        d = {'name': self.name, 'kind': self.kind, 'shape': list(self.shape)}
        if self.kind == 'binary':
            d['planes'] = self.planes
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            entry = cls(d['name'], d['kind'], tuple(int(s) for s in d['shape']), int(d.get('planes', 1)))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad tensor entry {d}: {e}") from e
        if entry.kind not in ('binary', 'float32') or entry.planes not in (1, 2) or not entry.shape:
            raise FormatError(f"bad tensor entry {d}")
        return entry


@dataclass
class PackedModel:
    header: dict
    tensors: dict             # name -> float32 array in parameter storage layout

    @property
    def spec(self):
        return ModelSpec.from_dict(self.header['spec'])

    def entries(self):
        for layer in self.header['layers']:
            for t in layer['tensors']:
                yield layer, TensorEntry.from_dict(t)


def _encode_binary(value, planes):
    """Parameter storage -> packed sign rows, real plane first"""
    c_out = value.shape[0]
    parts = [ComplexTensor(value).re, ComplexTensor(value).im] if planes == 2 else [value]
    return b''.join(
        pack_bool_rows(part.reshape(c_out, -1) >= 0).astype('<u8').tobytes() for part in parts)


def _decode_binary(buf, entry):
    words = word_count(entry.row_bits)
    packed = np.frombuffer(buf, dtype='<u8').reshape(entry.planes * entry.rows, words)
    signs = np.where(unpack_bool_rows(packed, entry.row_bits), 1.0, -1.0).astype(np.float32)
    parts = [signs[i * entry.rows:(i + 1) * entry.rows].reshape(entry.shape) for i in range(entry.planes)]
    return np.concatenate(parts, axis=1) if entry.planes == 2 else parts[0]


def _entry_for(name, value, planes=0):
    if planes:
        shape = (value.shape[0], value.shape[1] // planes) + tuple(value.shape[2:])
        return TensorEntry(name, 'binary', shape, planes)
    return TensorEntry(name, 'float32', tuple(value.shape))


def model_layers(model):
    """(header layer table, name -> array) for every layer holding parameters or buffers"""
    table, arrays = [], {}
    for layer in model.layers():
        params = layer.own_parameters()
        buffers = layer.own_buffers()
        if not params and not buffers:
            continue
        tensors = []
        for p in params:
            planes = BINARY_PLANES.get(layer.kind, 0) if p.binary else 0
            tensors.append(_entry_for(p.name, p.value, planes).to_dict())
            arrays[p.name] = p.value
        for key, value in buffers.items():
            name = f"{layer.name}.{key}"
            tensors.append(_entry_for(name, value).to_dict())
            arrays[name] = value
        table.append({
            'name': layer.name,
            'type': layer.kind,
            'norm': layer.kind if layer.kind in NORM_LAYERS else None,
            'tensors': tensors,
        })
    return table, arrays


def encode_packed(spec_dict, layers, arrays):
    """Bytes of a packed model file for a header layer table and its arrays"""
    header = {'spec': spec_dict, 'layers': layers}
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    chunks = []
    for layer in layers:
        for t in layer['tensors']:
            entry = TensorEntry.from_dict(t)
            value = np.asarray(arrays[entry.name])
            if entry.kind == 'binary':
                chunk = _encode_binary(value, entry.planes)
            else:
                chunk = value.astype('<f4').tobytes()
            if len(chunk) != entry.nbytes:
                raise FormatError(f"{entry.name}: encoded {len(chunk)} bytes, header implies {entry.nbytes}")
            chunks.append(chunk)
    payload = b''.join(chunks)
    return b''.join([
        _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)),
        header_bytes,
        _PAYLOAD_LEN.pack(len(payload)),
        payload,
        _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF),
    ])


def export_model(model):
    """Binarize latent weights once and encode the model as packed bytes"""
    layers, arrays = model_layers(model)
    return encode_packed(model.spec.to_dict(), layers, arrays)


def write_packed_model(model, path):
    data = export_model(model)
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(data)
    os.replace(tmp, path)
    logger.info(f"📦 exported {path}: {len(data)} bytes")
    return len(data)


def decode_packed(data):
    """Validate and decode packed bytes into a PackedModel"""
    if len(data) < _PREFIX.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    offset = _PREFIX.size
    if len(data) < offset + header_len + _PAYLOAD_LEN.size:
        raise FormatError(f"truncated header: need {offset + header_len + _PAYLOAD_LEN.size} bytes, have {len(data)}")
    try:
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
        if not isinstance(header.get('spec'), dict) or not isinstance(header.get('layers'), list):
            raise ValueError('header needs a spec object and a layers list')
    except (UnicodeDecodeError, ValueError, AttributeError, TypeError) as e:
        raise FormatError(f"unreadable header at offset {offset}: {e}") from e
    offset += header_len
    payload_len, = _PAYLOAD_LEN.unpack_from(data, offset)
    offset += _PAYLOAD_LEN.size
    if len(data) != offset + payload_len + _CRC.size:
        raise FormatError(f"length mismatch: header declares {payload_len} payload bytes, "
                          f"file holds {len(data) - offset - _CRC.size}")
    payload = data[offset:offset + payload_len]
    crc, = _CRC.unpack_from(data, offset + payload_len)
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise FormatError(f"CRC mismatch: stored 0x{crc:08x}, computed 0x{actual:08x}")
    packed = PackedModel(header, {})
    position = 0
    try:
        entries = list(packed.entries())
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed layer table: {e}") from e
    implied = sum(entry.nbytes for _, entry in entries)
    if implied != payload_len:
        raise FormatError(f"layer table implies {implied} payload bytes, file declares {payload_len}")
    for _, entry in entries:
        chunk = payload[position:position + entry.nbytes]
        position += entry.nbytes
        if entry.kind == 'binary':
            packed.tensors[entry.name] = _decode_binary(chunk, entry)
        else:
            packed.tensors[entry.name] = np.frombuffer(chunk, dtype='<f4').reshape(entry.shape).astype(np.float32)
    return packed


def read_packed_model(path):
    if not os.path.exists(path):
        raise FormatError(f"{path} not found")
    with open(path, 'rb') as f:
        return decode_packed(f.read())


def load_packed_model(path):
    """Rebuild the model; binary latents take the stored ±1 values"""
    packed = read_packed_model(path)
    model = build_model(packed.spec)
    params = {p.name: packed.tensors.get(p.name) for p in model.parameters()}
    buffers = {name: packed.tensors.get(name) for name in model.buffers()}
    missing = [name for name, v in {**params, **buffers}.items() if v is None]
    if missing:
        raise FormatError(f"file lacks tensors {missing[:5]} required by its spec")
    model.load_state(params, buffers)
    return model.eval()


def plane_statistics(packed):
    """Fraction of +1 bits per plane of every binary tensor"""
    rows = []
    for layer, entry in packed.entries():
        if entry.kind != 'binary':
            continue
        value = packed.tensors[entry.name]
        parts = [ComplexTensor(value).re, ComplexTensor(value).im] if entry.planes == 2 else [value]
        for plane, part in zip(('re', 'im'), parts):
            rows.append({
                'layer': layer['name'],
                'tensor': entry.name,
                'plane': plane if entry.planes == 2 else 'real',
                'bits': int(part.size),
                'plus_fraction': float((part > 0).mean()),
            })
    return pd.DataFrame(rows, columns=['layer', 'tensor', 'plane', 'bits', 'plus_fraction'])


def inspect_packed(path):
    """Header, parameter census and bit statistics of a packed model file"""
    packed = read_packed_model(path)
    model = build_model(packed.spec)
    return {
        'header': packed.header,
        'census': count_params(model).as_dict(),
        'bits': plane_statistics(packed),
    }
