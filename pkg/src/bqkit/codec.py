"""Bit-exact serialization of compressed models.

Label streams are packed LSB-first within bytes, little-endian across bytes,
or entropy-coded with canonical Huffman (code lengths only in the manifest;
code bits are emitted MSB-of-code-first into the same LSB-first bit order).
".bqz" files carry a JSON manifest plus byte-aligned payload sections, each
with a CRC32 so corruption is detected rather than decoded into garbage.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .container import (F32, U8, Model, QuantParams, TensorRecord, manifest_from_dict,
                        _manifest_to_dict, round_half_away, validate_model, write_atomic)
from .gwk import PQCodebook, pq_restore
from .qat import QatConfig

_BQZ_MAGIC = b"BQZ1"
_BQZ_VERSION = 1


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class PackedStream:
    bits_per_symbol: int
    symbol_count: int
    payload: bytes

    def __post_init__(self):
        if not 1 <= self.bits_per_symbol <= 16:
            raise CodecError(f"bits_per_symbol out of [1,16]: {self.bits_per_symbol}")
        want = (self.symbol_count * self.bits_per_symbol + 7) // 8
        if len(self.payload) != want:
            raise CodecError(f"payload length {len(self.payload)} != {want}")


def pack_labels(labels, bits: int) -> PackedStream:
    """Fixed-width packing, LSB-first within each byte."""
    labels = np.asarray(labels, dtype=np.uint64).reshape(-1)
    if not 1 <= bits <= 16:
        raise CodecError(f"bits out of [1,16]: {bits}")
    if labels.size and int(labels.max()) >= 1 << bits:
        raise CodecError(f"label {int(labels.max())} overflows {bits} bits")
    if labels.size == 0:
        return PackedStream(bits, 0, b"")
    bit_matrix = ((labels[:, None] >> np.arange(bits, dtype=np.uint64)) & 1).astype(np.uint8)
    return PackedStream(bits, labels.size, np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes())


def unpack_labels(stream: PackedStream) -> np.ndarray:
    if stream.symbol_count == 0:
        return np.zeros(0, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(stream.payload, dtype=np.uint8), bitorder="little")
    bits = bits[: stream.symbol_count * stream.bits_per_symbol]
    bits = bits.reshape(stream.symbol_count, stream.bits_per_symbol).astype(np.int64)
    return bits @ (1 << np.arange(stream.bits_per_symbol, dtype=np.int64))


@dataclass(frozen=True)
class HuffmanTable:
    lengths: np.ndarray  # code length per symbol, 0 = absent

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        lengths.flags.writeable = False
        object.__setattr__(self, "lengths", lengths)
        present = lengths[lengths > 0]
        if present.size == 0:
            raise CodecError("empty Huffman table")
        kraft = float((2.0 ** (-present.astype(np.float64))).sum())
        if kraft > 1.0 + 1e-12:
            raise CodecError(f"Kraft inequality violated: {kraft}")

    @property
    def alphabet_size(self) -> int:
        return len(self.lengths)


def huffman_code_lengths(freqs) -> np.ndarray:
    """Optimal prefix code lengths; ties break on (frequency, symbol index)."""
    freqs = np.asarray(freqs, dtype=np.int64)
    heap = [(int(f), s, None) for s, f in enumerate(freqs) if f > 0]
    if not heap:
        raise CodecError("huffman needs a non-empty stream")
    lengths = np.zeros(len(freqs), dtype=np.int64)
    if len(heap) == 1:
        lengths[heap[0][1]] = 1
        return lengths
    heapq.heapify(heap)
    while len(heap) > 1:
        f1, s1, n1 = heapq.heappop(heap)
        f2, s2, n2 = heapq.heappop(heap)
        heapq.heappush(heap, (f1 + f2, min(s1, s2), ((s1, n1), (s2, n2))))
    stack = [(heap[0][1:], 0)]
    while stack:
        (sym, node), depth = stack.pop()
        if node is None:
            lengths[sym] = depth
        else:
            stack.append((node[0], depth + 1))
            stack.append((node[1], depth + 1))
    return lengths


def _canonical_codes(lengths: np.ndarray):
    """(codes, symbols sorted by (length, symbol)); deterministic."""
    order = sorted(int(s) for s in np.flatnonzero(lengths > 0))
    order.sort(key=lambda s: (int(lengths[s]), s))
    codes = np.zeros(len(lengths), dtype=np.int64)
    code = 0
    prev = 0
    for s in order:
        code <<= int(lengths[s]) - prev
        codes[s] = code
        prev = int(lengths[s])
        code += 1
    return codes, order


def huffman_encode(labels) -> tuple:
    """Canonical Huffman coding of a label stream -> (table, payload bytes)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise CodecError("huffman needs a non-empty stream")
    freqs = np.bincount(labels)
    table = HuffmanTable(huffman_code_lengths(freqs))
    codes, _ = _canonical_codes(table.lengths)
    lengths = table.lengths
    offsets = np.concatenate(([0], np.cumsum(lengths[labels])))
    bits = np.zeros(int(offsets[-1]), dtype=np.uint8)
    for s in np.flatnonzero(freqs):
        L = int(lengths[s])
        starts = offsets[:-1][labels == s]
        for j in range(L):
            bits[starts + j] = (int(codes[s]) >> (L - 1 - j)) & 1
    return table, np.packbits(bits, bitorder="little").tobytes()


def huffman_decode(table: HuffmanTable, payload: bytes, count: int) -> np.ndarray:
    """Inverse of huffman_encode; raises on malformed or truncated streams."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    codes, order = _canonical_codes(table.lengths)
    first_code = {}
    first_idx = {}
    n_at = {}
    for idx, s in enumerate(order):
        L = int(table.lengths[s])
        if L not in first_code:
            first_code[L] = int(codes[s])
            first_idx[L] = idx
            n_at[L] = 0
        n_at[L] += 1
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    out = np.empty(count, dtype=np.int64)
    pos = 0
    code = 0
    length = 0
    max_len = int(table.lengths.max())
    for i in range(count):
        code = 0
        length = 0
        while True:
            if pos >= len(bits):
                raise CodecError("huffman stream truncated")
            code = (code << 1) | int(bits[pos])
            pos += 1
            length += 1
            base = first_code.get(length)
            if base is not None and base <= code < base + n_at[length]:
                out[i] = order[first_idx[length] + code - base]
                break
            if length > max_len:
                raise CodecError("invalid huffman code in stream")
    return out


def compression_ratio(n: int, m: int, b: int) -> float:
    """Storage reduction of an n*m layer binned to b values: 32nm/(log2(b)nm+32b)."""
    if n < 1 or m < 1:
        raise CodecError("n and m must be >= 1")
    if b < 2:
        raise CodecError("b must be >= 2")
    nm = n * m
    return 32.0 * nm / (math.log2(b) * nm + 32.0 * b)


# --- ".bqz" container ---------------------------------------------------------


def _section(chunks: list, offset: int, raw: bytes):
    chunks.append(raw)
    return {"offset": offset, "length": len(raw), "crc32": zlib.crc32(raw)}, offset + len(raw)


def write_compressed(model: Model, codings: dict, path, qat: QatConfig | None = None) -> int:
    """Write a ".bqz" file.

    ``codings`` maps tensor name -> descriptor; tensors without one are
    stored raw. Descriptors:
      {"mode": "bq", "spec": BinSpec, "labels": ndarray, "huffman": bool}
      {"mode": "pq", "codebook": PQCodebook, "origin": dict}
    The stored streams must reconstruct the model's tensors exactly; this is
    validated before writing.
    """
    validate_model(model.manifest, model.tensors)
    entries = []
    chunks = []
    offset = 0
    for name, t in model.tensors.items():
        coding = codings.get(name)
        entry = {
            "name": name,
            "dtype": t.dtype,
            "shape": list(t.shape),
            "quant": None if t.quant is None else
                     {"scale": t.quant.scale, "zero_point": int(t.quant.zero_point)},
            "sections": {},
        }
        if coding is None:
            entry["mode"] = "raw"
            sec, offset = _section(chunks, offset, t.data.tobytes())
            entry["sections"]["raw"] = sec
        elif coding["mode"] == "bq":
            spec, labels = coding["spec"], np.asarray(coding["labels"], dtype=np.int64)
            b = spec.b
            bits = max(1, math.ceil(math.log2(b))) if b > 1 else 1
            if t.dtype == U8:
                reps = np.clip(round_half_away(spec.representatives), 0, 255).astype(np.uint8)
            else:
                reps = spec.representatives.astype("<f4")
            recon = reps[labels]
            if not np.array_equal(recon, t.array().reshape(-1).astype(recon.dtype)):
                raise CodecError(f"bq coding for {name!r} does not reconstruct the tensor")
            entry["mode"] = "bq"
            entry["b"] = int(b)
            entry["bits"] = int(bits)
            if coding.get("huffman"):
                table, payload = huffman_encode(labels)
                entry["coding"] = "huffman"
                entry["huffman_lengths"] = [int(x) for x in table.lengths]
            else:
                payload = pack_labels(labels, bits).payload
                entry["coding"] = "packed"
            entry["symbol_count"] = int(labels.size)
            sec, offset = _section(chunks, offset, payload)
            entry["sections"]["labels"] = sec
            sec, offset = _section(chunks, offset, reps.tobytes())
            entry["sections"]["codebook"] = sec
        elif coding["mode"] == "pq":
            cb: PQCodebook = coding["codebook"]
            origin = coding["origin"]
            b = cb.b
            bits = max(1, math.ceil(math.log2(b))) if b > 1 else 1
            cents = cb.centroids.astype("<f4")
            recon = pq_restore(cents.astype(np.float64)[:, cb.labels], origin).astype(np.float32)
            if not np.array_equal(recon.reshape(-1), t.array().reshape(-1)):
                raise CodecError(f"pq coding for {name!r} does not reconstruct the tensor")
            entry["mode"] = "pq"
            entry["b"] = int(b)
            entry["bits"] = int(bits)
            entry["d"] = int(cents.shape[0])
            entry["n_blocks"] = int(cb.labels.size)
            entry["pad"] = int(origin["pad"])
            entry["kind"] = origin["kind"]
            entry["symbol_count"] = int(cb.labels.size)
            payload = pack_labels(cb.labels, bits).payload
            sec, offset = _section(chunks, offset, payload)
            entry["sections"]["labels"] = sec
            sec, offset = _section(chunks, offset, cents.tobytes(order="C"))
            entry["sections"]["codebook"] = sec
        else:
            raise CodecError(f"unknown coding mode {coding['mode']!r}")
        entries.append(entry)

    manifest = {
        "format": "bqz",
        "version": _BQZ_VERSION,
        "model": _manifest_to_dict(model.manifest),
        "qat": None if qat is None else qat.to_dict(),
        "layers": entries,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = _BQZ_MAGIC + struct.pack("<HI", _BQZ_VERSION, len(blob))
    return write_atomic(path, head + blob + b"".join(chunks))


def _get_section(payload: bytes, sec: dict, what: str) -> bytes:
    lo, n = sec["offset"], sec["length"]
    if lo + n > len(payload):
        raise CodecError(f"{what}: payload truncated")
    raw = payload[lo : lo + n]
    if zlib.crc32(raw) != sec["crc32"]:
        raise CodecError(f"{what}: CRC mismatch (corrupted payload)")
    return raw


def read_compressed(path):
    """Read a ".bqz" file -> (Model, info).

    ``info`` carries the decoded per-layer storage accounting: mode, b, bits,
    d, n_blocks, section byte sizes, and the optional QatConfig.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _BQZ_MAGIC:
        raise CodecError(f"bad magic {raw[:4]!r}")
    version, mlen = struct.unpack("<HI", raw[4:10])
    if version != _BQZ_VERSION:
        raise CodecError(f"unsupported version {version}")
    if 10 + mlen > len(raw):
        raise CodecError("manifest truncated")
    manifest = json.loads(raw[10 : 10 + mlen].decode("utf-8"))
    payload = raw[10 + mlen :]

    model_manifest = manifest_from_dict(manifest["model"])
    tensors = {}
    layer_info = []
    for e in manifest["layers"]:
        name = e["name"]
        shape = tuple(e["shape"])
        quant = e.get("quant")
        qp = None if quant is None else QuantParams(quant["scale"], quant["zero_point"])
        dtype = e["dtype"]
        if e["mode"] == "raw":
            buf = _get_section(payload, e["sections"]["raw"], name)
            data = np.frombuffer(buf, dtype="<f4" if dtype == F32 else "u1")
        elif e["mode"] == "bq":
            lab_raw = _get_section(payload, e["sections"]["labels"], name)
            cb_raw = _get_section(payload, e["sections"]["codebook"], name)
            reps = np.frombuffer(cb_raw, dtype="<f4" if dtype == F32 else "u1")
            if len(reps) != e["b"]:
                raise CodecError(f"{name}: codebook size mismatch")
            if e["coding"] == "huffman":
                table = HuffmanTable(np.asarray(e["huffman_lengths"], dtype=np.int64))
                labels = huffman_decode(table, lab_raw, e["symbol_count"])
            else:
                labels = unpack_labels(PackedStream(e["bits"], e["symbol_count"], lab_raw))
            if labels.size and labels.max() >= e["b"]:
                raise CodecError(f"{name}: label exceeds codebook")
            data = reps[labels]
        elif e["mode"] == "pq":
            lab_raw = _get_section(payload, e["sections"]["labels"], name)
            cb_raw = _get_section(payload, e["sections"]["codebook"], name)
            cents = np.frombuffer(cb_raw, dtype="<f4").reshape(e["d"], e["b"])
            labels = unpack_labels(PackedStream(e["bits"], e["symbol_count"], lab_raw))
            origin = {"shape": shape, "kind": e["kind"], "d": e["d"], "pad": e["pad"],
                      "layout": "filter-major" if e["kind"] == "Conv2D" else "row-major"}
            data = pq_restore(cents.astype(np.float64)[:, labels], origin).astype(np.float32).reshape(-1)
        else:
            raise CodecError(f"unknown mode {e['mode']!r}")
        tensors[name] = TensorRecord(name, dtype, shape, data, qp)

        native_bits = 32 if dtype == F32 else 8
        info_entry = {"layer": name, "mode": e["mode"],
                      "weight_count": int(np.prod(shape)), "native_bits": native_bits}
        if e["mode"] != "raw":
            info_entry["label_bits"] = e["sections"]["labels"]["length"] * 8
            info_entry["codebook_bits"] = e["sections"]["codebook"]["length"] * 8
            info_entry["b"] = e["b"]
            info_entry["bits"] = e["bits"]
        if e["mode"] == "pq":
            info_entry["d"] = e["d"]
            info_entry["n_blocks"] = e["n_blocks"]
        layer_info.append(info_entry)

    validate_model(model_manifest, tensors)
    qat = None if manifest.get("qat") is None else QatConfig.from_dict(manifest["qat"])
    model = Model(model_manifest, tensors)
    info = {"layers": layer_info, "qat": qat, "manifest_bytes": 10 + mlen,
            "payload_bytes": len(payload)}
    return model, info
