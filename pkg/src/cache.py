"""
Binary split cache.

Layout (all integers little-endian):

    header   magic b"ODSC" | version u16 | N0 u32 | k u32
             | count u32 x 4 (closed_train, closed_test, open_test, pseudo_open_train)
    names    k x (length u16 | utf-8 bytes)
    records  per partition, in header order:
             label u32 | provenance u8 | id length u16 | utf-8 id
             | N0 x 3 float32 coordinates
"""

import io
import struct
from pathlib import Path

import numpy as np

from src.entities import DatasetSplit, LabeledSample, PointCloud, Provenance
from src.errors import CacheFormatError, CacheTruncatedError, CacheVersionError

CACHE_MAGIC = b"ODSC"
CACHE_VERSION = 1

_HEADER = struct.Struct("<4sHII4I")
_RECORD = struct.Struct("<IBH")
_NAME = struct.Struct("<H")

_PARTITIONS = ("closed_train", "closed_test", "open_test", "pseudo_open_train")
_PROVENANCE_CODES = {
    Provenance.REAL: 0,
    Provenance.PSEUDO_OPEN: 1,
    Provenance.OPEN_TEST: 2,
}
_PROVENANCE_BY_CODE = {code: p for p, code in _PROVENANCE_CODES.items()}


def _encode_text(text: str) -> bytes:
    data = text.encode("utf-8")
    if len(data) > 0xFFFF:
        raise CacheFormatError(f"string too long for cache: {text[:40]!r}...")
    return _NAME.pack(len(data)) + data


def write_cache(split: DatasetSplit, path: Path | str) -> Path:
    """Serialize a split; ``read_cache`` restores it bit-exactly"""
    path = Path(path)
    n0 = split.num_points
    buffer = io.BytesIO()
    buffer.write(
        _HEADER.pack(
            CACHE_MAGIC,
            CACHE_VERSION,
            n0,
            split.num_known,
            *(len(getattr(split, name)) for name in _PARTITIONS),
        )
    )
    for name in split.class_names:
        buffer.write(_encode_text(name))
    for partition in _PARTITIONS:
        for sample in getattr(split, partition):
            id_bytes = sample.sample_id.encode("utf-8")
            buffer.write(
                _RECORD.pack(
                    sample.label, _PROVENANCE_CODES[sample.provenance], len(id_bytes)
                )
            )
            buffer.write(id_bytes)
            buffer.write(sample.cloud.points.astype("<f4", copy=False).tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    return path


class _Reader:
    """Cursor over the cache bytes that fails loudly on truncation"""

    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CacheTruncatedError(
                f"{self.path}: truncated while reading {what} "
                f"(needed {size} bytes at offset {self.offset}, "
                f"file has {len(self.data)})"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple:
        return layout.unpack(self.take(layout.size, what))

    def text(self, what: str) -> str:
        (length,) = self.unpack(_NAME, what)
        return self.take(length, what).decode("utf-8")


def read_cache(path: Path | str) -> DatasetSplit:
    """Load a split written by ``write_cache``"""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)

    magic = reader.take(4, "magic")
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a split cache (magic {magic!r})")
    reader.offset = 0
    _, version, n0, k, *counts = reader.unpack(_HEADER, "header")
    if version != CACHE_VERSION:
        raise CacheVersionError(
            f"{path}: cache version {version}, expected {CACHE_VERSION}"
        )

    class_names = [reader.text(f"class name {i}") for i in range(k)]
    point_bytes = n0 * 3 * 4
    partitions: dict[str, list[LabeledSample]] = {}
    for partition, count in zip(_PARTITIONS, counts, strict=True):
        samples = []
        for index in range(count):
            what = f"{partition} record {index}"
            label, code, id_length = reader.unpack(_RECORD, what)
            sample_id = reader.take(id_length, what).decode("utf-8")
            points = np.frombuffer(reader.take(point_bytes, what), dtype="<f4")
            if code not in _PROVENANCE_BY_CODE:
                raise CacheFormatError(f"{path}: {what} has provenance code {code}")
            samples.append(
                LabeledSample(
                    sample_id=sample_id,
                    cloud=PointCloud(points=points.reshape(n0, 3).copy()),
                    label=label,
                    provenance=_PROVENANCE_BY_CODE[code],
                )
            )
        partitions[partition] = samples

    if reader.offset != len(reader.data):
        raise CacheFormatError(
            f"{path}: {len(reader.data) - reader.offset} trailing bytes after records"
        )
    return DatasetSplit(class_names=class_names, **partitions)
