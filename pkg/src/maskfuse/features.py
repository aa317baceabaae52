"""Per-instance feature vectors, the OVFT binary format, and cosine queries.

File layout (little-endian): magic ``OVFT``, u32 version (1), u32 record
count, u32 dimension, then per record a u8 key kind followed by the key and
the float32 vector.  Key kinds: 0 = instance id (u32), 1 = frame + 2D mask
id (u32, u32), 2 = labeled query (u32 byte length + UTF-8 label).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .instances import CropRequest, InstanceMap

log = logging.getLogger(__name__)

MAGIC = b"OVFT"
VERSION = 1

KEY_INSTANCE = 0
KEY_FRAME_MASK = 1
KEY_QUERY = 2

UNIT_NORM_TOL = 1e-4


@dataclass
class FeatureRecord:
    kind: int
    key: int | tuple[int, int] | str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.ndim != 1:
            raise DataError("feature vectors must be 1-D")
        if self.kind == KEY_INSTANCE and not isinstance(self.key, int):
            raise DataError(f"instance record key must be an int, got {self.key!r}")
        if self.kind == KEY_FRAME_MASK and (
            not isinstance(self.key, tuple) or len(self.key) != 2
        ):
            raise DataError(f"frame+mask record key must be a pair, got {self.key!r}")
        if self.kind == KEY_QUERY and not isinstance(self.key, str):
            raise DataError(f"query record key must be a label string, got {self.key!r}")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise DataError(f"feature vector for key {self.key!r} has norm {norm:.6f}, not 1")


def instance_record(instance_id: int, vector) -> FeatureRecord:
    return FeatureRecord(kind=KEY_INSTANCE, key=int(instance_id), vector=vector)


def query_record(label: str, vector) -> FeatureRecord:
    return FeatureRecord(kind=KEY_QUERY, key=label, vector=vector)


def write_feature_file(path, records: list[FeatureRecord]) -> None:
    if not records:
        raise DataError("refusing to write an empty feature file")
    dim = len(records[0].vector)
    for rec in records:
        if len(rec.vector) != dim:
            raise DataError("all feature vectors must share one dimension")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(records), dim))
        for rec in records:
            fh.write(struct.pack("<B", rec.kind))
            if rec.kind == KEY_INSTANCE:
                fh.write(struct.pack("<I", rec.key))
            elif rec.kind == KEY_FRAME_MASK:
                fh.write(struct.pack("<II", rec.key[0], rec.key[1]))
            elif rec.kind == KEY_QUERY:
                encoded = rec.key.encode("utf-8")
                fh.write(struct.pack("<I", len(encoded)))
                fh.write(encoded)
            else:
                raise DataError(f"unknown key kind {rec.kind}")
            fh.write(rec.vector.astype("<f4").tobytes())


def read_feature_file(path) -> list[FeatureRecord]:
    try:
        blob = open(path, "rb").read()
    except FileNotFoundError:
        raise DataError(f"missing feature file {path}") from None
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    offset = 16
    records: list[FeatureRecord] = []
    vec_bytes = 4 * dim
    for _ in range(count):
        (kind,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        key: int | tuple[int, int] | str
        if kind == KEY_INSTANCE:
            (key,) = struct.unpack_from("<I", blob, offset)
            offset += 4
        elif kind == KEY_FRAME_MASK:
            key = struct.unpack_from("<II", blob, offset)
            offset += 8
        elif kind == KEY_QUERY:
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            key = blob[offset : offset + length].decode("utf-8")
            offset += length
        else:
            raise DataError(f"{path}: unknown key kind {kind}")
        vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        records.append(FeatureRecord(kind=kind, key=key if kind != KEY_FRAME_MASK else tuple(key), vector=vector))
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return records


def attach_features(
    imap: InstanceMap,
    records: list[FeatureRecord],
    manifest: list[CropRequest] | None = None,
) -> InstanceMap:
    """Attach vectors to instances; returns a new map.

    Kind-0 records address instances directly; kind-1 records resolve
    through the crop manifest's (frame, mask id) pairs and may legitimately
    feed several instances that share a crop.  A second record for the same
    key is an error; records addressing nothing are skipped with a warning.
    """
    out = imap.copy()
    by_frame_mask: dict[tuple[int, int], list[int]] = {}
    for req in manifest or []:
        by_frame_mask.setdefault((req.frame, req.mask_id), []).append(req.instance_id)
    seen: set = set()
    for rec in records:
        if rec.kind == KEY_QUERY:
            raise DataError("query records cannot be attached to instances")
        if rec.key in seen:
            raise DataError(f"duplicate feature record for key {rec.key!r}")
        seen.add(rec.key)
        if rec.kind == KEY_INSTANCE:
            targets = [rec.key] if rec.key in out.records else []
        else:
            targets = [iid for iid in by_frame_mask.get(rec.key, []) if iid in out.records]
        if not targets:
            log.warning("feature record for unknown key %r skipped", rec.key)
            continue
        for iid in targets:
            out.records[iid].feature = rec.vector
    return out


def featured_instances(imap: InstanceMap) -> tuple[list[int], np.ndarray]:
    ids = sorted(iid for iid, rec in imap.records.items() if rec.feature is not None)
    if not ids:
        return [], np.zeros((0, 0), dtype=np.float32)
    return ids, np.stack([imap.records[iid].feature for iid in ids])


def query(imap: InstanceMap, q: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    """Instances ranked by cosine similarity to a unit query vector."""
    q = np.asarray(q, dtype=np.float32)
    if abs(float(np.linalg.norm(q)) - 1.0) > UNIT_NORM_TOL:
        raise DataError("query vector must be unit-normalized")
    ids, matrix = featured_instances(imap)
    if not ids:
        return []
    scores = matrix @ q
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], float(scores[i])) for i in order[:top_k]]


@dataclass
class QuerySet:
    """Labeled unit query vectors; labels must be distinct."""

    entries: list[tuple[str, np.ndarray]]

    def __post_init__(self):
        labels = [label for label, _ in self.entries]
        if len(set(labels)) != len(labels):
            raise DataError("query labels must be distinct")
        self.entries = [
            (label, np.asarray(vec, dtype=np.float32)) for label, vec in self.entries
        ]
        for label, vec in self.entries:
            if abs(float(np.linalg.norm(vec)) - 1.0) > UNIT_NORM_TOL:
                raise DataError(f"query vector for {label!r} is not unit-normalized")

    @classmethod
    def from_records(cls, records: list[FeatureRecord]) -> "QuerySet":
        return cls(entries=[(r.key, r.vector) for r in records if r.kind == KEY_QUERY])


def label_instances(imap: InstanceMap, queries: QuerySet) -> InstanceMap:
    """Give each featured instance the label of its highest-cosine query
    (ties break to the earlier query)."""
    if not queries.entries:
        raise DataError("label_instances requires a nonempty query set")
    out = imap.copy()
    qmat = np.stack([vec for _, vec in queries.entries])
    for iid, rec in out.records.items():
        if rec.feature is None:
            continue
        scores = qmat @ rec.feature
        rec.label = queries.entries[int(np.argmax(scores))][0]
    return out
