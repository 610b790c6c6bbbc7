"""On-disk formats: label masks, embedding maps, centroid sets, manifests.

All binary layouts are ``magic (4 bytes) | version (1 byte) | uint32 LE dims
| payload``. Masks carry uint16 LE ids, embeddings and centroids float32 LE.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

VERSION = 1
IGNORE = 65535
OTHER = 0
MAX_CATEGORIES = 65534

MASK_MAGIC = b"LSMK"
EMB_MAGIC = b"LEMB"
CENTROID_MAGIC = b"LCTR"
BANK_MAGIC = b"LBNK"


class FormatError(ValueError):
    """Malformed or truncated input file."""


def _open_sink(sink):
    if isinstance(sink, (str, os.PathLike)):
        return open(sink, "wb"), True
    return sink, False


def _read_all(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _write(sink, blob: bytes):
    fh, owned = _open_sink(sink)
    try:
        fh.write(blob)
    finally:
        if owned:
            fh.close()


def _header(blob: bytes, magic: bytes, ndims: int, what: str):
    size = 5 + 4 * ndims
    if len(blob) < 4 or blob[:4] != magic:
        raise FormatError(f"bad magic for {what}: {blob[:4]!r} (expected {magic!r})")
    if len(blob) < 5:
        raise FormatError(f"truncated {what} header")
    if blob[4] != VERSION:
        raise FormatError(f"unsupported {what} version {blob[4]}")
    if len(blob) < size:
        raise FormatError(f"truncated {what} header")
    return struct.unpack_from(f"<{ndims}I", blob, 5), size


def _payload(blob: bytes, offset: int, count: int, dtype: str, what: str) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    need = offset + count * itemsize
    if len(blob) < need:
        raise FormatError(f"truncated {what} payload: need {need} bytes, have {len(blob)}")
    if len(blob) > need:
        raise FormatError(f"trailing bytes after {what} payload")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset)


# -- masks ------------------------------------------------------------------

def validate_mask(labels, n_categories=None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"a mask must be a non-empty H x W grid, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if np.any(arr < 0) or np.any(arr > IGNORE):
            raise ValueError("mask ids must fit in 16 bits")
        arr = arr.astype(np.uint16)
    if n_categories is not None:
        bad = (arr > n_categories) & (arr != IGNORE)
        if np.any(bad):
            raise ValueError(f"mask id {int(arr[bad].max())} exceeds category count {n_categories}")
    return arr


def mask_bytes(labels) -> bytes:
    arr = validate_mask(labels)
    h, w = arr.shape
    return MASK_MAGIC + bytes([VERSION]) + struct.pack("<II", w, h) + arr.astype("<u2").tobytes()


def write_mask(labels, sink):
    _write(sink, mask_bytes(labels))


def read_mask(source) -> np.ndarray:
    blob = _read_all(source)
    (w, h), off = _header(blob, MASK_MAGIC, 2, "mask")
    if w == 0 or h == 0:
        raise FormatError("mask has an empty dimension")
    return _payload(blob, off, w * h, "<u2", "mask").astype(np.uint16).reshape(h, w)


def import_png_mask(rgb_pixels, width, height) -> np.ndarray:
    """Convert decoded RGB pixels (``id = R + 256*G``) to a mask."""
    rgb = np.asarray(rgb_pixels)
    try:
        rgb = rgb.reshape(height, width, -1)
    except ValueError:
        raise ValueError(f"pixel buffer of shape {rgb.shape} does not match {width}x{height}") from None
    if rgb.shape[2] not in (3, 4):
        raise ValueError(f"expected RGB or RGBA pixels, got {rgb.shape[2]} channels")
    r = rgb[..., 0].astype(np.uint32)
    g = rgb[..., 1].astype(np.uint32)
    ids = r + 256 * g
    ids[(r == 255) & (g == 255)] = IGNORE
    return ids.astype(np.uint16)


# -- embeddings -------------------------------------------------------------

def embedding_bytes(z) -> bytes:
    arr = np.asarray(z)
    if arr.ndim != 3:
        raise ValueError(f"embedding must be L x H x W, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains non-finite values")
    l, h, w = arr.shape
    return EMB_MAGIC + bytes([VERSION]) + struct.pack("<III", l, h, w) + arr.astype("<f4").tobytes()


def write_embedding(z, sink):
    _write(sink, embedding_bytes(z))


def read_embedding(source) -> np.ndarray:
    """Read an embedding map, widened to float64."""
    blob = _read_all(source)
    (l, h, w), off = _header(blob, EMB_MAGIC, 3, "embedding")
    data = _payload(blob, off, l * h * w, "<f4", "embedding")
    if not np.all(np.isfinite(data)):
        raise FormatError("embedding payload contains non-finite values")
    return data.astype(np.float64).reshape(l, h, w)


# -- centroids --------------------------------------------------------------

def write_centroids(centers, sink):
    arr = np.asarray(centers)
    if arr.ndim != 2:
        raise ValueError(f"centroids must be a C x L matrix, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("a centroid set needs at least one center")
    if not np.all(np.isfinite(arr)):
        raise ValueError("centroids contain non-finite values")
    c, l = arr.shape
    _write(sink, CENTROID_MAGIC + bytes([VERSION]) + struct.pack("<II", c, l) + arr.astype("<f4").tobytes())


def read_centroids(source) -> np.ndarray:
    blob = _read_all(source)
    (c, l), off = _header(blob, CENTROID_MAGIC, 2, "centroid set")
    if c < 1:
        raise FormatError("centroid set declares zero centers")
    data = _payload(blob, off, c * l, "<f4", "centroid set")
    if not np.all(np.isfinite(data)):
        raise FormatError("centroid payload contains non-finite values")
    return data.astype(np.float64).reshape(c, l)


# -- attention parameters ---------------------------------------------------
# Stored in the embedding layout as a 1 x (L+2) x L map: rows 0..L-1 hold the
# L x L weight, row L the bias, row L+1 theta.

def write_attention(params, sink):
    w, b = params.m_a.layers[0]
    write_embedding(np.vstack([w, b[None, :], params.theta[None, :]])[None], sink)


def read_attention(source):
    from .labelgen import AttentionParams

    arr = read_embedding(source)
    _, rows, l = arr.shape
    if arr.shape[0] != 1 or rows != l + 2:
        raise FormatError(f"attention file has shape {arr.shape}, expected 1 x (L+2) x L")
    m = arr[0]
    return AttentionParams.affine(m[:l], m[l], m[l + 1])


# -- embedding bank ---------------------------------------------------------
# LBNK | version | N | L | N*L float32 | N uint16 labels | N x (uint32 len + utf-8 id)

def write_bank(bank, sink):
    vecs = np.asarray(bank.vectors)
    n, l = vecs.shape if vecs.size else (0, bank.dim)
    out = io.BytesIO()
    out.write(BANK_MAGIC + bytes([VERSION]) + struct.pack("<II", n, l))
    out.write(vecs.astype("<f4").tobytes())
    out.write(np.asarray(bank.labels, dtype="<u2").tobytes())
    for image_id in bank.image_ids:
        raw = image_id.encode("utf-8")
        out.write(struct.pack("<I", len(raw)) + raw)
    _write(sink, out.getvalue())


def read_bank(source):
    from .protocols import EmbeddingBank

    blob = _read_all(source)
    (n, l), off = _header(blob, BANK_MAGIC, 2, "bank")
    need = off + n * l * 4 + n * 2
    if len(blob) < need:
        raise FormatError("truncated bank payload")
    vecs = np.frombuffer(blob, "<f4", n * l, off).astype(np.float64).reshape(n, l)
    labels = np.frombuffer(blob, "<u2", n, off + n * l * 4).astype(np.int64)
    pos, ids = need, []
    for _ in range(n):
        if pos + 4 > len(blob):
            raise FormatError("truncated bank id table")
        (k,) = struct.unpack_from("<I", blob, pos)
        if pos + 4 + k > len(blob):
            raise FormatError("truncated bank id table")
        ids.append(blob[pos + 4:pos + 4 + k].decode("utf-8"))
        pos += 4 + k
    if pos != len(blob):
        raise FormatError("trailing bytes after bank")
    return EmbeddingBank(vecs, labels, ids, dim=l)


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    mask_path: str
    gt_categories: frozenset


@dataclass
class Manifest:
    category_count: int
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def parse_manifest(text: str) -> Manifest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("C="):
        raise FormatError("line 1: manifest must start with 'C=<count>'")
    try:
        c = int(lines[0][2:])
    except ValueError:
        raise FormatError(f"line 1: bad category count {lines[0][2:]!r}") from None
    if not 1 <= c <= MAX_CATEGORIES:
        raise FormatError(f"line 1: category count {c} out of range 1..{MAX_CATEGORIES}")
    entries, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise FormatError(f"line {lineno}: expected 'image_id<TAB>mask_path<TAB>ids'")
        image_id, path, ids = parts
        if image_id in seen:
            raise FormatError(f"line {lineno}: duplicate image id {image_id!r}")
        try:
            cats = frozenset(int(tok) for tok in ids.split(","))
        except ValueError:
            raise FormatError(f"line {lineno}: malformed category list {ids!r}") from None
        bad = sorted(k for k in cats if not 1 <= k <= c)
        if bad:
            raise FormatError(f"line {lineno}: category id {bad[0]} outside 1..{c}")
        seen.add(image_id)
        entries.append(ManifestEntry(image_id, path, cats))
    return Manifest(c, entries)


def read_manifest(source) -> Manifest:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return parse_manifest(fh.read())
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return parse_manifest(data)


def format_manifest(manifest: Manifest) -> str:
    lines = [f"C={manifest.category_count}"]
    for e in manifest.entries:
        lines.append(f"{e.image_id}\t{e.mask_path}\t{','.join(str(k) for k in sorted(e.gt_categories))}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, sink):
    _write(sink, format_manifest(manifest).encode("utf-8"))
