from __future__ import annotations

import collections
import enum
import random
import struct

from dataclasses import dataclass, field
from typing import Counter, List, Optional, Sequence, Tuple, Union

import numpy as np

from cachetools import LRUCache

import config
from modules.encoding import QuantizerSpec, decode_signed, encode_signed, quantize_vector
from modules.errors import (
    BadMagic,
    BadVersion,
    EpochMismatch,
    LengthMismatch,
    MalformedPayload,
    NoGainEpoch,
    ProtocolError,
    Truncated,
    UnknownType,
)
from modules.lindesign import LinearDesign
from modules.paillier import (
    BlindingKey,
    Ciphertext,
    PrivateKey,
    PublicKey,
    decrypt,
    derive_rng,
    encrypt,
    linear_combination,
    unblind,
)
from modules.polyapprox import NonlinearDesign, monomial_vector
from modules.utils import get_logger
from modules.zoom import Phase, ZoomState

logger = get_logger()

MAGIC = b"ECTL"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
U32 = struct.Struct(">I")
U16 = struct.Struct(">H")


class MessageType(enum.IntEnum):
    PUBKEY = 1
    BLINDED_GAIN = 2
    ENC_STATE = 3
    ENC_INPUT = 4
    SENSITIVITY_EPOCH = 5
    SHUTDOWN = 6


@dataclass(frozen=True)
class WireMessage:
    """
    One protocol message.

    Attributes
    ----------------
    msg_type: :class:`MessageType`
        The message type.
    epoch: :class:`int`
        Sensitivity epoch the payload belongs to.
    rows, cols: :class:`int`
        Shape of a blinded gain matrix.
    values: Tuple[:class:`int`, ...]
        Public key (N, g), gain entries row by row, or ciphertexts.
    """

    msg_type: MessageType
    epoch: int = 0
    rows: int = 0
    cols: int = 0
    values: Tuple[int, ...] = ()

    @classmethod
    def pubkey(cls, pk: PublicKey) -> WireMessage:
        return cls(MessageType.PUBKEY, values=(pk.n, pk.g))

    @classmethod
    def blinded_gain(cls, epoch: int, matrix) -> WireMessage:
        matrix = np.atleast_2d(np.asarray(matrix, dtype=object))
        rows, cols = matrix.shape
        return cls(MessageType.BLINDED_GAIN, epoch=epoch, rows=rows, cols=cols, values=tuple(int(v) for v in matrix.ravel()))

    @classmethod
    def enc_state(cls, epoch: int, cts: Sequence[Ciphertext]) -> WireMessage:
        return cls(MessageType.ENC_STATE, epoch=epoch, values=tuple(c.value for c in cts))

    @classmethod
    def enc_input(cls, epoch: int, cts: Sequence[Ciphertext]) -> WireMessage:
        return cls(MessageType.ENC_INPUT, epoch=epoch, values=tuple(c.value for c in cts))

    @classmethod
    def sensitivity_epoch(cls, epoch: int) -> WireMessage:
        return cls(MessageType.SENSITIVITY_EPOCH, epoch=epoch)

    @classmethod
    def shutdown(cls) -> WireMessage:
        return cls(MessageType.SHUTDOWN)

    @property
    def ciphertexts(self) -> List[Ciphertext]:
        return [Ciphertext(v) for v in self.values]

    @property
    def matrix(self) -> List[List[int]]:
        return [list(self.values[i * self.cols : (i + 1) * self.cols]) for i in range(self.rows)]


def _pack_uint(value: int) -> bytes:
    if value < 0:
        raise ValueError(f"Cannot pack negative value {value} as unsigned")
    magnitude = value.to_bytes((value.bit_length() + 7) // 8, "big")
    return U32.pack(len(magnitude)) + magnitude


def _pack_sint(value: int) -> bytes:
    return bytes([1 if value < 0 else 0]) + _pack_uint(abs(value))


def serialize_message(msg: WireMessage) -> bytes:
    """Encode a message as header (magic, version, type, payload length) followed by the payload."""
    kind = msg.msg_type
    if kind is MessageType.PUBKEY:
        payload = b"".join(_pack_uint(v) for v in msg.values)
    elif kind is MessageType.BLINDED_GAIN:
        if len(msg.values) != msg.rows * msg.cols:
            raise LengthMismatch(f"{len(msg.values)} entries for a {msg.rows}x{msg.cols} gain")
        payload = U32.pack(msg.epoch) + U16.pack(msg.rows) + U16.pack(msg.cols)
        payload += b"".join(_pack_sint(v) for v in msg.values)
    elif kind in (MessageType.ENC_STATE, MessageType.ENC_INPUT):
        payload = U32.pack(msg.epoch) + U16.pack(len(msg.values)) + b"".join(_pack_uint(v) for v in msg.values)
    elif kind is MessageType.SENSITIVITY_EPOCH:
        payload = U32.pack(msg.epoch)
    else:
        payload = b""

    return HEADER.pack(MAGIC, VERSION, kind, len(payload)) + payload


class _PayloadReader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise Truncated(f"Payload ends before field at offset {self.offset}")
        chunk = self.payload[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return U32.unpack(self.take(U32.size))[0]

    def u16(self) -> int:
        return U16.unpack(self.take(U16.size))[0]

    def uint(self) -> int:
        return int.from_bytes(self.take(self.u32()), "big")

    def sint(self) -> int:
        sign = self.take(1)[0]
        if sign > 1:
            raise MalformedPayload(f"Invalid sign byte {sign}")
        value = self.uint()
        return -value if sign else value

    def finish(self):
        if self.offset != len(self.payload):
            raise MalformedPayload(f"{len(self.payload) - self.offset} trailing bytes")


def parse_header(data: bytes) -> Tuple[MessageType, int]:
    """Validate a header and return the message type and the declared payload length."""
    if len(data) >= len(MAGIC) and data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"Unexpected magic {data[:len(MAGIC)]!r}")
    if len(data) < HEADER.size:
        raise Truncated(f"Header needs {HEADER.size} bytes, got {len(data)}")

    _, version, kind, length = HEADER.unpack_from(data)
    if version != VERSION:
        raise BadVersion(f"Unsupported protocol version {version}")
    try:
        kind = MessageType(kind)
    except ValueError:
        raise UnknownType(f"Unknown message type {kind}") from None
    if length > config.MAX_MESSAGE_SIZE:
        raise MalformedPayload(f"Declared payload of {length} bytes exceeds the message limit")

    return kind, length


def parse_message(data: bytes) -> WireMessage:
    kind, length = parse_header(data)
    payload = data[HEADER.size :]
    if len(payload) < length:
        raise Truncated(f"Payload is {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise MalformedPayload(f"{len(payload) - length} bytes after the payload")

    reader = _PayloadReader(payload)
    if kind is MessageType.PUBKEY:
        msg = WireMessage(kind, values=(reader.uint(), reader.uint()))
    elif kind is MessageType.BLINDED_GAIN:
        epoch, rows, cols = reader.u32(), reader.u16(), reader.u16()
        msg = WireMessage(kind, epoch=epoch, rows=rows, cols=cols, values=tuple(reader.sint() for _ in range(rows * cols)))
    elif kind in (MessageType.ENC_STATE, MessageType.ENC_INPUT):
        epoch, count = reader.u32(), reader.u16()
        msg = WireMessage(kind, epoch=epoch, values=tuple(reader.uint() for _ in range(count)))
    elif kind is MessageType.SENSITIVITY_EPOCH:
        msg = WireMessage(kind, epoch=reader.u32())
    else:
        msg = WireMessage(kind)
    reader.finish()

    return msg


class PlantQuantizer:
    """
    Plant-side quantization of states and gains, shared by the encrypted and the plaintext loop.

    Parameters
    ----------------
    design: Union[:class:`LinearDesign`, :class:`NonlinearDesign`]
        The loop design.
    zoom: :class:`ZoomState`
        Live sensitivity schedule, advanced by the loop driver.
    """

    def __init__(self, design: Union[LinearDesign, NonlinearDesign], zoom: ZoomState):
        self.design = design
        self.zoom = zoom
        self.nonlinear = isinstance(design, NonlinearDesign)
        # one entry per zoom stage, the gain only changes when the stage does
        self._gain_cache = LRUCache(maxsize=64)

    @property
    def spec(self) -> QuantizerSpec:
        return QuantizerSpec(self.zoom.delta, self.design.q_sat)

    @property
    def n_in(self) -> int:
        return self.design.gain_length if self.nonlinear else self.design.n_x

    def state_levels(self, x) -> np.ndarray:
        """Levels the plant encrypts, monomials of x in the nonlinear loop, zeros while zooming out."""
        if self.nonlinear:
            return quantize_vector(self.spec, monomial_vector(float(np.ravel(x)[0]), self.n_in - 1))
        if self.zoom.phase is Phase.ZOOM_OUT:
            return np.zeros(self.n_in, dtype=np.int64)
        return quantize_vector(self.spec, x)

    def gain_levels(self) -> np.ndarray:
        if not self.nonlinear:
            return -self.design.K_q

        stage = self.zoom.stage_index
        if stage not in self._gain_cache:
            self._gain_cache[stage] = self.design.gain_levels(self.zoom.delta).reshape(1, -1)
        return self._gain_cache[stage]

    def input_scale(self) -> float:
        if self.nonlinear:
            return self.zoom.delta**2
        return self.design.delta_g * self.zoom.delta


@dataclass
class PlantNodeState:
    """
    Everything the plant owns. None of the secret fields ever leave this object in clear.

    Attributes
    ----------------
    public, private: :class:`PublicKey`, :class:`PrivateKey`
        The key pair.
    quantizer: :class:`PlantQuantizer`
        State and gain quantization.
    blinding: :class:`BlindingKey`
        Current blinding integer r.
    epoch: :class:`int`
        Current sensitivity epoch.
    """

    public: PublicKey
    private: PrivateKey = field(repr=False)
    quantizer: PlantQuantizer = field(repr=False)
    blinding: BlindingKey = field(repr=False)
    encrypt_rng: random.Random = field(repr=False)
    blinding_rng: random.Random = field(repr=False)
    epoch: int = 0
    last_levels: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def create(
        cls, public: PublicKey, private: PrivateKey, quantizer: PlantQuantizer, seed: int, r_max: int
    ) -> PlantNodeState:
        blinding_rng = derive_rng(seed, "blind")
        return cls(
            public=public,
            private=private,
            quantizer=quantizer,
            blinding=BlindingKey.sample(blinding_rng, r_max),
            encrypt_rng=derive_rng(seed, "encrypt"),
            blinding_rng=blinding_rng,
        )


def plant_emit_gain(plant: PlantNodeState) -> WireMessage:
    """Blinded gain r * (gain levels) for the current epoch."""
    return WireMessage.blinded_gain(plant.epoch, plant.quantizer.gain_levels().astype(object) * plant.blinding.r)


def plant_new_epoch(plant: PlantNodeState) -> WireMessage:
    """Start a new epoch with a fresh blinding integer, the controller drops its gain on receipt."""
    plant.epoch += 1
    plant.blinding = BlindingKey.sample(plant.blinding_rng, plant.blinding.r_max)
    return WireMessage.sensitivity_epoch(plant.epoch)


def plant_emit_state(plant: PlantNodeState, x, t: int) -> WireMessage:
    levels = plant.quantizer.state_levels(x)
    plant.last_levels = levels

    n = plant.public.n
    cts = [encrypt(plant.public, encode_signed(n, z).residue, plant.encrypt_rng) for z in levels]
    logger.debug(f"t={t} encrypted {len(cts)} state levels")
    return WireMessage.enc_state(plant.epoch, cts)


def plant_apply_input(plant: PlantNodeState, msg: WireMessage, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decrypt, decode and unblind the controller's reply.

    Returns
    -------
    :class:`tuple`
        The real input u and its integer levels u_q.

    Raises
    ------
    :class:`OverflowDetected`
        If a decoded value lands in the overflow band.
    :class:`NotDivisible`
        If a decoded value is not a multiple of r.
    """
    if msg.msg_type is not MessageType.ENC_INPUT:
        raise ProtocolError(f"Expected ENC_INPUT at t={t}, got {msg.msg_type.name}")
    if msg.epoch != plant.epoch:
        raise EpochMismatch(f"Input of epoch {msg.epoch} arrived in epoch {plant.epoch}")

    n = plant.public.n
    u_levels = np.array(
        [unblind(plant.blinding, decode_signed(n, decrypt(plant.private, c))) for c in msg.ciphertexts],
        dtype=object,
    )
    u = np.array([float(v) for v in u_levels]) * plant.quantizer.input_scale()

    return u, u_levels


@dataclass
class ControllerNodeState:
    """
    The controller's whole state: public key, epoch and blinded gain. It never holds a secret.
    """

    public: Optional[PublicKey] = None
    epoch: int = 0
    gain_epoch: Optional[int] = None
    blinded_gain: Optional[List[List[int]]] = None
    message_counts: Counter[str] = field(default_factory=collections.Counter)


def controller_compute_input(ctrl: ControllerNodeState, msg: WireMessage) -> WireMessage:
    """
    Homomorphic product of the blinded gain with the encrypted state.

    Raises
    ------
    :class:`NoGainEpoch`
        If no gain is installed.
    :class:`EpochMismatch`
        If the state belongs to a different epoch than the gain.
    """
    if ctrl.public is None or ctrl.blinded_gain is None:
        raise NoGainEpoch("Encrypted state arrived before a blinded gain")
    if msg.epoch != ctrl.gain_epoch:
        raise EpochMismatch(f"State of epoch {msg.epoch} against gain of epoch {ctrl.gain_epoch}")

    cts = msg.ciphertexts
    n = ctrl.public.n
    outputs = []
    for row in ctrl.blinded_gain:
        if len(row) != len(cts):
            raise LengthMismatch(f"Gain row of {len(row)} entries for {len(cts)} ciphertexts")
        outputs.append(linear_combination(ctrl.public, [g % n for g in row], cts))

    return WireMessage.enc_input(msg.epoch, outputs)


def controller_handle(ctrl: ControllerNodeState, msg: WireMessage) -> Optional[WireMessage]:
    """Apply one incoming message, returning the reply if there is one."""
    ctrl.message_counts[msg.msg_type.name] += 1

    if msg.msg_type is MessageType.PUBKEY:
        ctrl.public = PublicKey(n=msg.values[0], g=msg.values[1])
    elif msg.msg_type is MessageType.SENSITIVITY_EPOCH:
        ctrl.epoch = msg.epoch
        ctrl.blinded_gain = None
        ctrl.gain_epoch = None
    elif msg.msg_type is MessageType.BLINDED_GAIN:
        if msg.epoch != ctrl.epoch:
            raise EpochMismatch(f"Gain of epoch {msg.epoch} arrived in epoch {ctrl.epoch}")
        ctrl.blinded_gain = msg.matrix
        ctrl.gain_epoch = msg.epoch
    elif msg.msg_type is MessageType.ENC_STATE:
        return controller_compute_input(ctrl, msg)
    elif msg.msg_type is MessageType.ENC_INPUT:
        raise ProtocolError("Controller received an ENC_INPUT message")

    return None
