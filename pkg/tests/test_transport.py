import asyncio
import logging

import pytest

from modules.errors import BadMagic, Truncated
from modules.protocol import MessageType, WireMessage, serialize_message
from modules.transport import QueueTransport, read_message


def feed(data: bytes) -> asyncio.StreamReader:
    reader = asyncio.StreamReader()
    reader.feed_data(data)
    reader.feed_eof()
    return reader


async def read_fed(data: bytes):
    return await read_message(feed(data))


def test_queue_pair_delivers_in_order():
    async def exchange():
        tap = []
        plant_end, controller_end = QueueTransport.pair(tap)
        await plant_end.send(WireMessage.sensitivity_epoch(1))
        await plant_end.send(WireMessage.shutdown())
        await controller_end.send(WireMessage.sensitivity_epoch(9))

        received = [await controller_end.receive(), await controller_end.receive()]
        return tap, received, await plant_end.receive()

    tap, received, reply = asyncio.run(exchange())
    assert [msg.msg_type for msg in received] == [MessageType.SENSITIVITY_EPOCH, MessageType.SHUTDOWN]
    assert received[0].epoch == 1
    assert reply.epoch == 9
    # only the tapped plant end records frames
    assert tap == [serialize_message(WireMessage.sensitivity_epoch(1)), serialize_message(WireMessage.shutdown())]


def test_queue_close_truncates_peer():
    async def closed():
        plant_end, controller_end = QueueTransport.pair()
        await plant_end.close()
        await controller_end.receive()

    with pytest.raises(Truncated):
        asyncio.run(closed())


def test_read_message_frames():
    async def read_two():
        data = serialize_message(WireMessage.sensitivity_epoch(4)) + serialize_message(WireMessage.shutdown())
        reader = feed(data)
        return await read_message(reader), await read_message(reader)

    first, second = asyncio.run(read_two())
    assert first == WireMessage.sensitivity_epoch(4)
    assert second == WireMessage.shutdown()


@pytest.mark.parametrize(
    "data",
    [
        b"",
        b"ECTL\x01",
        serialize_message(WireMessage.sensitivity_epoch(4))[:-2],
    ],
)
def test_read_message_truncated(data):
    with pytest.raises(Truncated):
        asyncio.run(read_fed(data))


def test_read_message_bad_magic_in_partial_header():
    with pytest.raises(BadMagic):
        asyncio.run(read_fed(b"HTTP/1.1"))


def test_truncated_payload_is_logged(caplog):
    caplog.set_level(logging.DEBUG, logger="ECTL")
    with pytest.raises(Truncated):
        asyncio.run(read_fed(serialize_message(WireMessage.sensitivity_epoch(4))[:-2]))
    assert "inside a payload" in caplog.text


def test_closed_queue_is_logged(caplog):
    caplog.set_level(logging.DEBUG, logger="ECTL")

    async def closed():
        plant_end, controller_end = QueueTransport.pair()
        await plant_end.close()
        await controller_end.receive()

    with pytest.raises(Truncated):
        asyncio.run(closed())
    assert "peer closed" in caplog.text
