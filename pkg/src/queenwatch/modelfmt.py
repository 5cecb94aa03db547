"""QBF1 binary model format and the portable C rendering of a quantized forest.

QBF1 layout, all little-endian:

    offset  size        field
    0       4           magic "QBF1"
    4       2  u16      version (1)
    6       1  u8       n_features
    7       1  u8       flags: active-feature bitmask (bit0 dT, bit1 dH, bit2 dP, bit3 audio)
    8       4  i32      base_q
    12      8*F         scaler: F x (mean f32, std f32)
    ..      1  u8       feature_frac_bits
    ..      1  u8       leaf_frac_bits
    ..      2  u16      n_trees
    ..      2*T u16     root offset per tree
    ..      2N i16      node threshold_q
    ..      2N i16      node left (tree-relative, -1 = leaf)
    ..      2N i16      node right
    ..      4N i32      node slot: leaf_q for leaves, feature index for internal nodes
    end-4   4  u32      CRC-32 (IEEE) of every preceding byte

A node record is 10 bytes. Internal nodes carry no leaf value and leaves carry
no feature, so both share the 32-bit slot and `left == -1` tells them apart.
The node count N is implied by the blob length.
"""
from __future__ import annotations

import re
import struct
import sys
import zlib
from array import array

from .errors import (
    BadMagic,
    CrcMismatch,
    StructuralError,
    TooManyNodes,
    TruncatedBlob,
    UnsupportedVersion,
)
from .features import ScalerParams, bits_to_mask, mask_to_bits
from .quantize import I32_MIN, LEAF_FEATURE, MAX_NODES, NO_CHILD, QuantForest, QuantSpec

MAGIC = b"QBF1"
VERSION = 1
HEADER = struct.Struct("<4sHBBi")
NODE_BYTES = 10
_LITTLE = sys.byteorder == "little"


def _le_bytes(a: array) -> bytes:
    if _LITTLE:
        return a.tobytes()
    b = array(a.typecode, a)
    b.byteswap()
    return b.tobytes()


def _le_array(typecode: str, data: bytes) -> array:
    a = array(typecode)
    a.frombytes(data)
    if not _LITTLE:
        a.byteswap()
    return a


def serialize(q: QuantForest) -> bytes:
    q.check()
    if q.n_nodes > MAX_NODES:
        raise TooManyNodes(f"{q.n_nodes} nodes > {MAX_NODES}")
    parts = [HEADER.pack(MAGIC, VERSION, q.n_features, mask_to_bits(q.feature_mask), q.base_q)]
    for m, s in zip(q.scaler.mean, q.scaler.std):
        parts.append(struct.pack("<ff", m, s))
    parts.append(struct.pack("<BBH", q.spec.feature_frac_bits, q.spec.leaf_frac_bits, q.n_trees))
    parts.append(_le_bytes(q.roots))
    slot = array("i", (q.leaf_q[i] if q.feature[i] == LEAF_FEATURE else q.feature[i]
                       for i in range(q.n_nodes)))
    for a in (q.threshold_q, q.left, q.right, slot):
        parts.append(_le_bytes(a))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(blob: bytes) -> QuantForest:
    blob = bytes(blob)
    if len(blob) < HEADER.size:
        raise TruncatedBlob(f"{len(blob)} bytes, header needs {HEADER.size}")
    magic, version, n_features, flags, base_q = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagic(f"magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    if len(blob) < HEADER.size + 4:
        raise TruncatedBlob("no room for a checksum")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise CrcMismatch(f"stored {crc:#010x}, computed {zlib.crc32(blob[:-4]):#010x}")

    mask = bits_to_mask(flags)
    if flags >> 4 or len(mask) != n_features or n_features == 0:
        raise StructuralError(f"flags {flags:#04x} disagree with n_features={n_features}")
    off = HEADER.size
    need = off + 8 * n_features + 4
    if len(blob) - 4 < need:
        raise TruncatedBlob("scaler/tree table cut short")
    vals = struct.unpack_from(f"<{2 * n_features}f", blob, off)
    off += 8 * n_features
    ffrac, lfrac, n_trees = struct.unpack_from("<BBH", blob, off)
    off += 4
    if len(blob) - 4 < off + 2 * n_trees:
        raise TruncatedBlob("root table cut short")
    roots = _le_array("H", blob[off: off + 2 * n_trees])
    off += 2 * n_trees
    rest = len(blob) - 4 - off
    if rest % NODE_BYTES:
        raise StructuralError(f"{rest} node bytes is not a multiple of {NODE_BYTES}")
    n = rest // NODE_BYTES

    fields = []
    for code, width in (("h", 2), ("h", 2), ("h", 2), ("i", 4)):
        fields.append(_le_array(code, blob[off: off + width * n]))
        off += width * n
    thr, left, right, slot = fields
    feature, leaf_q = array("B"), array("i")
    for i in range(n):
        if left[i] == NO_CHILD:
            feature.append(LEAF_FEATURE)
            leaf_q.append(slot[i])
        elif 0 <= slot[i] < n_features:
            feature.append(slot[i])
            leaf_q.append(0)
        else:
            raise StructuralError(f"node {i} names feature {slot[i]}")
    try:
        spec = QuantSpec(ffrac, lfrac)
        scaler = ScalerParams(tuple(vals[0::2]), tuple(vals[1::2]))
    except Exception as exc:  # invalid widths, non-positive std
        raise StructuralError(str(exc)) from None
    if any(v != v or v in (float("inf"), float("-inf")) for v in vals):
        raise StructuralError("non-finite scaler parameter")
    q = QuantForest(feature, thr, left, right, leaf_q, roots,
                    scaler, base_q, spec, mask)
    q.check()
    return q


def read_model(path) -> QuantForest:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def write_model(q: QuantForest, path) -> bytes:
    blob = serialize(q)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


# --- C rendering --------------------------------------------------------------

def _c_i32(v: int) -> str:
    return "(-2147483647L - 1)" if v == I32_MIN else f"{v}L"


def _c_array(ctype: str, name: str, values, fmt=str, per_line=12) -> str:
    vals = [fmt(v) for v in values] or ["0"]  # C89 forbids zero-length arrays
    rows = [", ".join(vals[i: i + per_line]) for i in range(0, len(vals), per_line)]
    body = ",\n    ".join(rows)
    return f"static const {ctype} {name}[{len(vals)}] = {{\n    {body}\n}};\n"


def emit_static_source(q: QuantForest, name: str = "score") -> str:
    q.check()
    if q.n_nodes > MAX_NODES:
        raise TooManyNodes(f"{q.n_nodes} nodes > {MAX_NODES}")
    out = [
        "/* Generated by queenwatch emit-src. Do not edit. */\n",
        "/* Fixed-point forest: features Q.%d in int16, leaves Q.%d in int32. */\n\n"
        % (q.spec.feature_frac_bits, q.spec.leaf_frac_bits),
        "typedef short qf_i16;\n",
        "typedef long qf_i32;\n\n",
        f"#define QF_N_FEATURES {q.n_features}\n",
        f"#define QF_N_TREES {q.n_trees}\n",
        f"#define QF_N_NODES {q.n_nodes}\n",
        f"#define QF_FEATURE_FRAC {q.spec.feature_frac_bits}\n",
        f"#define QF_LEAF_FRAC {q.spec.leaf_frac_bits}\n",
        f"#define QF_FEATURE_MASK {mask_to_bits(q.feature_mask)}\n\n",
        f"const float qf_scaler_mean[QF_N_FEATURES] = {{ {', '.join(repr(float(m)) + 'f' for m in q.scaler.mean)} }};\n",
        f"const float qf_scaler_std[QF_N_FEATURES] = {{ {', '.join(repr(float(s)) + 'f' for s in q.scaler.std)} }};\n\n",
        _c_array("unsigned char", "qf_feature", q.feature),
        _c_array("qf_i16", "qf_threshold", q.threshold_q),
        _c_array("qf_i16", "qf_left", q.left),
        _c_array("qf_i16", "qf_right", q.right),
        _c_array("qf_i32", "qf_leaf", q.leaf_q, _c_i32, per_line=8),
        _c_array("unsigned short", "qf_root", q.roots),
        f"static const qf_i32 qf_base = {_c_i32(q.base_q)};\n\n",
        "static qf_i32 qf_sat_add(qf_i32 acc, qf_i32 v)\n"
        "{\n"
        "    if (v > 0 && acc > 2147483647L - v) return 2147483647L;\n"
        "    if (v < 0 && acc < (-2147483647L - 1) - v) return (-2147483647L - 1);\n"
        "    return acc + v;\n"
        "}\n\n",
        f"qf_i32 {name}(const qf_i16 features[])\n"
        "{\n"
        "    qf_i32 acc = qf_base;\n"
        "    unsigned int t, root, node;\n"
        "    for (t = 0; t < QF_N_TREES; ++t) {\n"
        "        root = qf_root[t];\n"
        "        node = root;\n"
        "        while (qf_feature[node] != 0xFF) {\n"
        "            if (features[qf_feature[node]] <= qf_threshold[node])\n"
        "                node = root + (unsigned int)qf_left[node];\n"
        "            else\n"
        "                node = root + (unsigned int)qf_right[node];\n"
        "        }\n"
        "        acc = qf_sat_add(acc, qf_leaf[node]);\n"
        "    }\n"
        "    return acc;\n"
        "}\n",
    ]
    return "".join(out)


_ARRAY_RE = re.compile(r"static const [\w ]+? (qf_\w+)\[\d+\] = \{(.*?)\};", re.S)
_BASE_RE = re.compile(r"static const qf_i32 qf_base = (.*?);")
_DEFINE_RE = re.compile(r"#define (QF_\w+) (\d+)")


def _c_int(text: str) -> int:
    text = text.strip()
    if text == "(-2147483647L - 1)":
        return I32_MIN
    return int(text.rstrip("L"))


def interpret_source(text: str):
    """Evaluate emitted source without a C compiler.

    Reads only the constant arrays out of the text and returns a callable with
    the semantics of the emitted `score` function.
    """
    arrays = {name: [_c_int(v) for v in body.split(",") if v.strip()]
              for name, body in _ARRAY_RE.findall(text)}
    defines = {k: int(v) for k, v in _DEFINE_RE.findall(text)}
    base = _c_int(_BASE_RE.search(text).group(1))
    n_trees = defines["QF_N_TREES"]
    feat, thr, lt, rt, leaf, roots = (arrays[k] for k in
                                      ("qf_feature", "qf_threshold", "qf_left", "qf_right", "qf_leaf", "qf_root"))

    def score(features):
        acc = base
        for t in range(n_trees):
            root = node = roots[t]
            while feat[node] != 0xFF:
                node = root + (lt[node] if features[feat[node]] <= thr[node] else rt[node])
            v = leaf[node]
            if v > 0 and acc > 2147483647 - v:
                acc = 2147483647
            elif v < 0 and acc < I32_MIN - v:
                acc = I32_MIN
            else:
                acc += v
        return acc

    return score
