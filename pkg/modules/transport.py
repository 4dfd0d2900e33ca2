from __future__ import annotations

import abc
import asyncio

from typing import List, Optional, Tuple

from modules.errors import Truncated
from modules.protocol import HEADER, WireMessage, parse_header, parse_message, serialize_message
from modules.utils import get_logger

logger = get_logger()


class Transport(abc.ABC):
    """
    Ordered, reliable message channel between plant and controller.

    Parameters
    ----------------
    tap: Optional[List[:class:`bytes`]]
        Every frame this end sends is appended here.
    """

    def __init__(self, tap: Optional[List[bytes]] = None):
        self.tap = tap

    async def send(self, msg: WireMessage):
        data = serialize_message(msg)
        if self.tap is not None:
            self.tap.append(data)
        await self.send_bytes(data)

    @abc.abstractmethod
    async def send_bytes(self, data: bytes):
        pass

    @abc.abstractmethod
    async def receive(self) -> WireMessage:
        pass

    async def close(self):
        pass


class QueueTransport(Transport):
    """In-process end backed by a pair of :class:`asyncio.Queue`."""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue, tap: Optional[List[bytes]] = None):
        super().__init__(tap)
        self.inbox = inbox
        self.outbox = outbox

    @classmethod
    def pair(cls, tap: Optional[List[bytes]] = None) -> Tuple[QueueTransport, QueueTransport]:
        """Plant end (tapped) and controller end."""
        to_controller, to_plant = asyncio.Queue(), asyncio.Queue()
        return cls(to_plant, to_controller, tap), cls(to_controller, to_plant)

    async def send_bytes(self, data: bytes):
        await self.outbox.put(data)

    async def receive(self) -> WireMessage:
        data = await self.inbox.get()
        if data is None:
            logger.debug("In-process peer closed its end")
            raise Truncated("Peer closed the channel")
        return parse_message(data)

    async def close(self):
        await self.outbox.put(None)


class StreamTransport(Transport):
    """TCP end over an :mod:`asyncio` stream pair."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, tap: Optional[List[bytes]] = None):
        super().__init__(tap)
        self.reader = reader
        self.writer = writer

    async def send_bytes(self, data: bytes):
        self.writer.write(data)
        await self.writer.drain()

    async def receive(self) -> WireMessage:
        return await read_message(self.reader)

    async def close(self):
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


async def read_message(reader: asyncio.StreamReader) -> WireMessage:
    """
    Read exactly one frame from a stream.

    Raises
    ------
    :class:`Truncated`
        If the stream ends inside a frame.
    """
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as e:
        if e.partial:
            parse_header(e.partial)
        logger.debug(f"Stream closed inside a header, {len(e.partial)} bytes read")
        raise Truncated(f"Stream ended after {len(e.partial)} header bytes") from None

    _, length = parse_header(header)
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as e:
        logger.debug(f"Stream closed inside a payload, {len(e.partial)} of {length} bytes read")
        raise Truncated(f"Stream ended after {len(e.partial)} of {length} payload bytes") from None

    return parse_message(header + payload)
