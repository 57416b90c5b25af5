"""
Little-endian byte cursor shared by the binary file formats.
"""
import struct

from src.errors import TruncatedFile


class ByteReader:
    """Cursor over a byte buffer that raises TruncatedFile on short reads."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedFile(f"Needed {size} bytes at offset {self.offset}, "
                                f"file has {len(self.data)}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def at_end(self) -> bool:
        return self.offset >= len(self.data)


def read_file(path: str) -> ByteReader:
    with open(path, 'rb') as f:
        return ByteReader(f.read())
