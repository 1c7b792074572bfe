"""Bit-exact file formats: mono PCM-16 WAV and the tensor container.

Container layout (all little-endian):

    magic    4 bytes  "P2SP"
    version  u32      currently 1
    count    u32      number of entries
    entry:
      name_len u32, name bytes (utf-8)
      dtype    u8   (0=f32, 1=f64, 2=i32, 3=i64, 4=u8)
      rank     u8
      dims     rank * u32
      payload  row-major raw bytes

Round trips are bit-exact; malformed inputs raise FormatError subclasses
rather than returning partial data.
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

from .dsp import AudioBuffer
from .errors import FormatError, InvalidArgument, TruncatedPayload, UnsupportedEncoding

MAGIC = b"P2SP"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("u1"): 4,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def read_wav(path) -> AudioBuffer:
    """Read a mono PCM-16 WAV file; samples are scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise UnsupportedEncoding(f"compressed WAV not supported: {wf.getcomptype()}")
            if wf.getnchannels() != 1:
                raise UnsupportedEncoding(f"expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise UnsupportedEncoding(f"expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            raw = wf.readframes(wf.getnframes())
            rate = wf.getframerate()
    except wave.Error as exc:
        raise FormatError(f"malformed WAV {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> int:
    """Write mono PCM-16; returns the number of samples clipped."""
    scaled = np.round(audio.samples * 32768.0)
    clipped = int(np.sum((scaled < -32768) | (scaled > 32767)))
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate_hz)
        wf.writeframes(pcm.tobytes())
    return clipped


def write_container(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays to a container file (see module docstring)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, array in entries.items():
        array = np.ascontiguousarray(array)
        if array.dtype not in _DTYPE_TAGS:
            if array.dtype.kind == "f":
                array = array.astype("<f8")
            elif array.dtype.kind in "iu":
                array = array.astype("<i8")
            else:
                raise InvalidArgument(f"unsupported dtype {array.dtype} for entry {name!r}")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[array.dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(
                f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> dict[str, np.ndarray]:
    """Read all entries of a container; bit-exact inverse of write_container."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise FormatError(f"bad magic in {path}")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unknown container version {version}")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        tag, rank = reader.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for entry {name!r}")
        dims = reader.unpack(f"<{rank}I") if rank else ()
        dtype = _TAG_DTYPES[tag]
        n_elems = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(n_elems * dtype.itemsize)
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return entries
