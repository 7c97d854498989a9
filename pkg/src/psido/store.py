"""Serialisation of images, sinograms, filter banks, checkpoints and manifests.

Binary containers are little-endian throughout.

Filter bank (``PSDO``)::

    magic "PSDO" | u16 version | u8 J | u8 J0 | u8 family | 32-byte geometry hash
    | u32 count | count x (u8 j, u8 t, u8 j', u8 t', u32 side, side*side f64)

Checkpoint (``PSCK``)::

    magic "PSCK" | u16 version | u8 variant | u32 header length | JSON header
    | u32 n_params | n_params f64

The checkpoint header holds the model descriptor, spec and geometry
descriptors, hex hashes, and the training history, serialised with sorted
keys.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, StorageError
from .opbank import FilterBank, bank_keys
from .wavelet import FAMILIES, TYPES, WaveletSpec

BANK_MAGIC = b"PSDO"
BANK_VERSION = 1
CKPT_MAGIC = b"PSCK"
CKPT_VERSION = 1
_TYPE_IDS = {t: i for i, t in enumerate(("f",) + TYPES)}
_TYPE_NAMES = {i: t for t, i in _TYPE_IDS.items()}


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def array_hash(arr):
    """SHA-256 of an array's canonical little-endian float64 bytes and shape."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.digest()


def _write(path, blob):
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise StorageError("cannot write file", path) from exc


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise StorageError("cannot read file", path) from exc


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise StorageError("truncated file", self.path)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# PFM -----------------------------------------------------------------------------

def save_pfm(path, arr):
    """Greyscale PFM, little-endian, scanlines stored bottom to top."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise InvalidArgument("PFM holds 2D arrays only")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    _write(path, header + np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def load_pfm(path):
    blob = _read(path)
    try:
        parts = blob.split(b"\n", 3)
        if parts[0].strip() != b"Pf":
            raise StorageError("not a greyscale PFM file", path)
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
        payload = parts[3]
    except (ValueError, IndexError) as exc:
        raise StorageError("malformed PFM header", path) from exc
    if len(payload) != 4 * w * h:
        raise StorageError("truncated PFM payload", path)
    dtype = "<f4" if scale < 0 else ">f4"
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1].astype(np.float64)


def save_image(path, image):
    save_pfm(path, image)


def load_image(path):
    return load_pfm(path)


def save_sinogram(path, sino, geom):
    save_pfm(path, sino)
    sidecar = Path(str(path) + ".json")
    try:
        sidecar.write_text(json.dumps(geom.descriptor(), sort_keys=True))
    except OSError as exc:
        raise StorageError("cannot write sinogram sidecar", sidecar) from exc


def load_sinogram(path):
    """Returns ``(values, geometry)``."""
    from .tomo import Geometry

    sidecar = Path(str(path) + ".json")
    try:
        desc = json.loads(sidecar.read_text())
    except OSError as exc:
        raise StorageError("cannot read sinogram sidecar", sidecar) from exc
    except json.JSONDecodeError as exc:
        raise StorageError("malformed sinogram sidecar", sidecar) from exc
    geom = Geometry.from_descriptor(desc)
    values = load_pfm(path)
    if values.shape != geom.sinogram_shape:
        raise StorageError("sinogram shape disagrees with its geometry", path)
    return values, geom


# filter banks -----------------------------------------------------------------------

def save_bank(path, bank):
    spec = bank.spec
    for key, f in bank.filters.items():
        if f.shape[0] != f.shape[1] or bank.centers[key] != (f.shape[0] // 2, f.shape[1] // 2):
            raise InvalidArgument("only square, centre-indexed banks can be stored")
    out = [BANK_MAGIC, struct.pack("<HBBB", BANK_VERSION, spec.J, spec.J0, FAMILIES.index(spec.family)),
           bytes(bank.geometry_hash).ljust(32, b"\0")[:32], struct.pack("<I", len(bank))]
    for key in bank_keys(spec):
        (j, t), (jp, tp) = key
        f = bank.filters[key]
        out.append(struct.pack("<BBBBI", j, _TYPE_IDS[t], jp, _TYPE_IDS[tp], f.shape[0]))
        out.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
    _write(path, b"".join(out))


def load_bank(path):
    r = _Reader(_read(path), path)
    magic = r.take(4)
    if magic != BANK_MAGIC:
        raise StorageError(f"bad magic {magic!r}, expected {BANK_MAGIC!r}", path)
    version, J, J0, fam = r.unpack("<HBBB")
    if version != BANK_VERSION:
        raise StorageError(f"unsupported bank version {version}, expected {BANK_VERSION}", path)
    if fam >= len(FAMILIES):
        raise StorageError(f"unknown wavelet family id {fam}", path)
    try:
        spec = WaveletSpec(FAMILIES[fam], J, J0)
    except InvalidArgument as exc:
        raise StorageError(f"invalid wavelet spec in bank: {exc}", path) from exc
    ghash = r.take(32)
    (count,) = r.unpack("<I")
    filters = {}
    for _ in range(count):
        j, t, jp, tp, side = r.unpack("<BBBBI")
        if t not in _TYPE_NAMES or tp not in _TYPE_NAMES:
            raise StorageError("unknown subband type id", path)
        data = np.frombuffer(r.take(8 * side * side), dtype="<f8").reshape(side, side)
        filters[((j, _TYPE_NAMES[t]), (jp, _TYPE_NAMES[tp]))] = data.astype(np.float64)
    if r.pos != len(r.blob):
        raise StorageError("trailing bytes after filter data", path)
    try:
        return FilterBank(spec, filters, geometry_hash=ghash, construction_side=2 ** (J + 1))
    except InvalidArgument as exc:
        raise StorageError(f"inconsistent bank: {exc}", path) from exc


# checkpoints ---------------------------------------------------------------------------

def save_checkpoint(path, ckpt):
    p = ckpt.params
    header = {
        "model": p.descriptor(),
        "spec": ckpt.spec_descriptor,
        "geometry": ckpt.geometry_descriptor,
        "geometry_hash": ckpt.geometry_hash.hex(),
        "bank_hash": ckpt.bank_hash.hex(),
        "mode": ckpt.mode,
        "history": [float(v) for v in ckpt.history],
        "val_history": [float(v) for v in ckpt.val_history],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    vec = np.ascontiguousarray(p.to_vector(), dtype="<f8")
    _write(path, b"".join([CKPT_MAGIC, struct.pack("<HB", CKPT_VERSION, "FO".index(p.variant)),
                           struct.pack("<I", len(blob)), blob, struct.pack("<I", vec.size),
                           vec.tobytes()]))


def load_checkpoint(path):
    from .psidonet import Checkpoint, ModelParams, center_layout

    r = _Reader(_read(path), path)
    magic = r.take(4)
    if magic != CKPT_MAGIC:
        raise StorageError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", path)
    version, variant_id = r.unpack("<HB")
    if version != CKPT_VERSION:
        raise StorageError(f"unsupported checkpoint version {version}, expected {CKPT_VERSION}", path)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except json.JSONDecodeError as exc:
        raise StorageError("malformed checkpoint header", path) from exc
    (n,) = r.unpack("<I")
    vec = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
    if r.pos != len(r.blob):
        raise StorageError("trailing bytes after checkpoint data", path)
    try:
        m = header["model"]
        if "FO"[variant_id] != m["variant"]:
            raise StorageError("variant id disagrees with header", path)
        spec = WaveletSpec(**header["spec"])
        layout = center_layout(spec, m["tau"])
        G = m["n_groups"]
        template = ModelParams(m["variant"], m["n_blocks"], G, m["tau"], m["positivity"],
                               np.zeros(G), np.zeros(G), np.zeros(G),
                               [{k: np.zeros(s) for k, (s, _) in layout.items()} for _ in range(G)])
        params = template.with_vector(vec)
        return Checkpoint(params, header["spec"], header["geometry"],
                          bytes.fromhex(header["geometry_hash"]), bytes.fromhex(header["bank_hash"]),
                          header["mode"], header["history"], header["val_history"])
    except (KeyError, TypeError, IndexError, InvalidArgument) as exc:
        raise StorageError(f"inconsistent checkpoint: {exc}", path) from exc


# manifests ------------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["entries", "geometry", "noise"],
    "properties": {
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "image", "sinogram", "noisy_sinogram", "seed"],
                "properties": {
                    "id": {"type": "string"},
                    "split": {"enum": ["train", "val", "test"]},
                    "image": {"type": "string"},
                    "sinogram": {"type": "string"},
                    "noisy_sinogram": {"type": "string"},
                    "seed": {"type": "integer"},
                    "sha256": {"type": "object"},
                },
            },
        },
        "geometry": {"type": "object"},
        "noise": {"type": "object"},
        "config": {"type": "object"},
    },
}


def save_manifest(path, manifest):
    ids = [e["id"] for e in manifest.entries]
    if len(ids) != len(set(ids)):
        raise InvalidArgument("manifest ids must be unique")
    try:
        Path(path).write_text(json.dumps(manifest.to_json(), sort_keys=True, indent=1))
    except OSError as exc:
        raise StorageError("cannot write manifest", path) from exc


def load_manifest(path, check_files=True):
    import jsonschema

    from .phantom import DatasetManifest

    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError("cannot read manifest", path) from exc
    except json.JSONDecodeError as exc:
        raise StorageError("malformed manifest JSON", path) from exc
    try:
        jsonschema.validate(doc, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise StorageError(f"manifest violates schema: {exc.message}", path) from exc
    root = Path(path).parent
    if check_files:
        for e in doc["entries"]:
            for k in ("image", "sinogram", "noisy_sinogram"):
                if not (root / e[k]).exists():
                    raise StorageError("manifest references a missing file", root / e[k])
                expected = e.get("sha256", {}).get(k)
                if expected is not None and file_hash(root / e[k]) != expected:
                    raise StorageError("file content does not match its recorded hash", root / e[k])
    return DatasetManifest(doc["entries"], doc["geometry"], doc["noise"], doc.get("config", {}))
