import io
from contextlib import nullcontext, AbstractContextManager
from typing import Literal


class SectionFile(io.RawIOBase):
    """
    A named byte range of a larger, seekable container file, readable as a file of its own.

    Positions are relative to the section start. Seeking past the end is allowed and
    reads there return ``b""``; the container cursor is repositioned on every read, so
    several sections may share one container (guard it with ``parent_lock`` across threads).
    """

    def __init__(self, container: io.IOBase, name: str, offset: int, size: int,
                 close_parent: bool = False, parent_lock=None):
        """
        :param container: The underlying file-like object. Must be seekable and readable.
        :param name: Section name inside the container.
        :param offset: The starting byte offset of this section within the container.
        :param size: The size in bytes of this section.
        :param close_parent: If True, closing this object also closes the container.
        :param parent_lock: A lock guarding the shared container cursor.
        """
        super().__init__()
        if not container.seekable() or not container.readable():
            raise ValueError("The underlying file must be readable and seekable.")
        if offset < 0 or size < 0:
            raise ValueError(f"section '{name}' has a negative offset or size")
        self._container = container
        self.name = name
        self.offset = offset
        self.size = size
        self._close_parent = close_parent
        self._parent_lock: AbstractContextManager = nullcontext() if parent_lock is None else parent_lock
        self._pos = 0

    def __repr__(self) -> str:
        return f"SectionFile({self.name!r}, offset={self.offset}, size={self.size})"

    def seekable(self) -> bool:
        return True

    def readable(self) -> bool:
        return True

    def _check_open(self):
        if self.closed:
            raise ValueError(f"I/O operation on closed section '{self.name}'.")

    def tell(self) -> int:
        self._check_open()
        return self._pos

    def seek(self, offset: int, whence: Literal[0, 1, 2] = io.SEEK_SET) -> int:
        self._check_open()
        origins = {io.SEEK_SET: 0, io.SEEK_CUR: self._pos, io.SEEK_END: self.size}
        if whence not in origins:
            raise ValueError(f"Invalid whence value: {whence}")
        target = origins[whence] + offset
        if target < 0:
            raise OSError(f"Negative seek position {target} in section '{self.name}'")
        self._pos = target
        return target

    def readinto(self, buffer) -> int:
        self._check_open()
        view = memoryview(buffer).cast('B')
        count = max(0, min(len(view), self.size - self._pos))
        if count == 0:
            return 0
        with self._parent_lock:
            self._container.seek(self.offset + self._pos)
            data = self._container.read(count)
        view[:len(data)] = data
        self._pos += len(data)
        return len(data)

    def close(self):
        if not self.closed:
            super().close()
        if self._close_parent and self._container is not None:
            with self._parent_lock:
                if not self._container.closed:
                    self._container.close()
        self._container = None

    @property
    def closed(self) -> bool:
        return self._container is None or self._container.closed

    @classmethod
    def from_table(cls, container: io.IOBase, table: list[dict], base_offset: int = 0) -> dict[str, 'SectionFile']:
        """
        Open every section listed in ``table`` (entries with name, offset and size, offsets
        relative to ``base_offset``), checking they lie inside the container.
        """
        total_size = container.seek(0, io.SEEK_END)
        container.seek(0)
        sections = {}
        for entry in table:
            start = base_offset + int(entry['offset'])
            size = int(entry['size'])
            if start + size > total_size:
                raise ValueError(f"section '{entry['name']}' runs past the end of the file "
                                 f"({start + size} > {total_size})")
            if entry['name'] in sections:
                raise ValueError(f"duplicate section '{entry['name']}'")
            sections[entry['name']] = cls(container, entry['name'], start, size)
        return sections
