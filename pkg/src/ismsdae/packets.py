"""Link-layer framing for the four protocol classes.

Frames are simplified but keep the structure that shows up at the
waveform level: BT basic-rate access code, FEC-1/3 header and whitened
payload; nRF Enhanced ShockBurst with an unwhitened payload; 802.15.4 PPDU;
802.11 SIGNAL field plus scrambled DATA field. ``build_packet`` returns the
bit sequence in transmission order as a ``uint8`` array.
"""

import numpy as np

from .errors import ParameterError
from .waveforms import ProtocolClass

# Inclusive legal payload sizes in bytes.
PAYLOAD_BOUNDS = {
    ProtocolClass.BT: (0, 27),      # DH1
    ProtocolClass.WIFI: (0, 2000),
    ProtocolClass.NRF: (0, 32),
    ProtocolClass.ZBEE: (0, 122),   # 127 - 3 byte MAC header - 2 byte FCS
}

BT_SYNC_WORD = 0x4E7A_1D2C_C7A5_52E3  # fixed 64-bit sync word, LSB sent first
NRF_ADDRESS = bytes([0xE7, 0xE7, 0xE7, 0xE7])
ZIGBEE_SFD = 0xA7
WIFI_RATE_BITS = (0, 1, 0, 1)  # QPSK r=1/2, 12 Mb/s


def bytes_to_bits(data, msb_first=False) -> np.ndarray:
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    return np.unpackbits(arr, bitorder="big" if msb_first else "little")


def int_to_bits(value, width, msb_first=False) -> np.ndarray:
    bits = np.array([(value >> i) & 1 for i in range(width)], dtype=np.uint8)
    return bits[::-1].copy() if msb_first else bits


def crc16_bits(bits, poly=0x1021, init=0xFFFF) -> int:
    """Bitwise CRC-16 (non-reflected) over a bit sequence."""
    reg = init
    for b in bits:
        top = ((reg >> 15) & 1) ^ int(b)
        reg = (reg << 1) & 0xFFFF
        if top:
            reg ^= poly
    return reg


def crc16_kermit(data) -> int:
    """CRC-16/ITU-T as used for the 802.15.4 FCS (reflected, init 0)."""
    reg = 0
    for byte in bytes(data):
        reg ^= byte
        for _ in range(8):
            reg = (reg >> 1) ^ 0x8408 if reg & 1 else reg >> 1
    return reg


def lfsr7_sequence(n, state) -> np.ndarray:
    """x^7 + x^4 + 1 whitening/scrambling sequence from a nonzero 7-bit state."""
    state &= 0x7F
    if state == 0:
        raise ParameterError("LFSR state must be nonzero")
    out = np.empty(n, dtype=np.uint8)
    for i in range(n):
        fb = ((state >> 6) ^ (state >> 3)) & 1
        out[i] = fb
        state = ((state << 1) | fb) & 0x7F
    return out


# 4-bit preamble + 64-bit sync + 4-bit trailer. The preamble/trailer alternate
# away from the neighbouring sync bit.
def _bt_access_code() -> np.ndarray:
    sync = int_to_bits(BT_SYNC_WORD, 64)
    pre = np.array([0, 1, 0, 1] if sync[0] else [1, 0, 1, 0], dtype=np.uint8)
    trail = np.array([0, 1, 0, 1] if sync[-1] else [1, 0, 1, 0], dtype=np.uint8)
    return np.concatenate([pre, sync, trail])


BT_ACCESS_CODE = _bt_access_code()
NRF_PREAMBLE = bytes_to_bits([0xAA if NRF_ADDRESS[0] & 0x80 else 0x55], msb_first=True)
ZIGBEE_PREAMBLE = np.zeros(32, dtype=np.uint8)


def _bt_packet(payload: bytes, rng) -> np.ndarray:
    whitening_state = int(rng.integers(1, 64)) | 0x40
    seqn = int(rng.integers(0, 2))
    header = np.concatenate([
        int_to_bits(1, 3),       # LT_ADDR
        int_to_bits(0b0100, 4),  # TYPE = DH1
        [1, 1, seqn],            # FLOW, ARQN, SEQN
    ]).astype(np.uint8)
    hec = crc16_bits(header, poly=0xA7, init=0x0047) & 0xFF
    header = np.concatenate([header, int_to_bits(hec, 8)])
    body = np.concatenate([
        int_to_bits(0b10, 2), [1], int_to_bits(len(payload), 5),  # LLID, FLOW, LENGTH
        bytes_to_bits(payload),
    ]).astype(np.uint8)
    body = np.concatenate([body, int_to_bits(crc16_bits(body), 16)])
    white = lfsr7_sequence(header.size + body.size, whitening_state)
    header = header ^ white[: header.size]
    body = body ^ white[header.size:]
    return np.concatenate([BT_ACCESS_CODE, np.repeat(header, 3), body])


def _nrf_packet(payload: bytes, rng) -> np.ndarray:
    pid = int(rng.integers(0, 4))
    addr = bytes_to_bits(NRF_ADDRESS, msb_first=True)
    pcf = np.concatenate([int_to_bits(len(payload), 6, msb_first=True),
                          int_to_bits(pid, 2, msb_first=True), [0]]).astype(np.uint8)
    data = np.concatenate([addr, pcf, bytes_to_bits(payload, msb_first=True)])
    crc = int_to_bits(crc16_bits(data), 16, msb_first=True)
    return np.concatenate([NRF_PREAMBLE, data, crc])


def _zigbee_packet(payload: bytes, rng) -> np.ndarray:
    seq = int(rng.integers(0, 256))
    psdu = bytes([0x41, 0x88, seq]) + bytes(payload)
    psdu += crc16_kermit(psdu).to_bytes(2, "little")
    header = bytes([ZIGBEE_SFD, len(psdu) & 0x7F])
    return np.concatenate([ZIGBEE_PREAMBLE, bytes_to_bits(header + psdu)])


def _wifi_packet(payload: bytes, rng) -> np.ndarray:
    length = int_to_bits(len(payload), 12)
    sig = np.concatenate([WIFI_RATE_BITS, [0], length]).astype(np.uint8)
    sig = np.concatenate([sig, [sig.sum() & 1], np.zeros(6, dtype=np.uint8)])
    data = np.concatenate([np.zeros(16, dtype=np.uint8), bytes_to_bits(payload)])
    scrambler = int(rng.integers(1, 128))
    data = data ^ lfsr7_sequence(data.size, scrambler)
    # SIGNAL rides in its own OFDM symbol: pad it to 104 bits (52 QPSK subcarriers).
    sig = np.concatenate([sig, np.zeros(104 - sig.size, dtype=np.uint8)])
    return np.concatenate([sig, data, np.zeros(6, dtype=np.uint8)])


_BUILDERS = {
    ProtocolClass.BT: _bt_packet,
    ProtocolClass.WIFI: _wifi_packet,
    ProtocolClass.NRF: _nrf_packet,
    ProtocolClass.ZBEE: _zigbee_packet,
}


def preamble_bits(protocol) -> np.ndarray:
    """The constant leading bits every packet of ``protocol`` starts with."""
    protocol = ProtocolClass.parse(protocol)
    if protocol is ProtocolClass.BT:
        return BT_ACCESS_CODE[:8].copy()
    if protocol is ProtocolClass.NRF:
        return NRF_PREAMBLE.copy()
    if protocol is ProtocolClass.ZBEE:
        return ZIGBEE_PREAMBLE.copy()
    return np.concatenate([WIFI_RATE_BITS, [0]]).astype(np.uint8)


def build_packet(protocol, payload, rng_seed) -> np.ndarray:
    protocol = ProtocolClass.parse(protocol)
    payload = bytes(payload)
    lo, hi = PAYLOAD_BOUNDS[protocol]
    if not lo <= len(payload) <= hi:
        raise ParameterError(
            f"{protocol.name} payload of {len(payload)} bytes outside [{lo}, {hi}]"
        )
    rng = np.random.default_rng(rng_seed)
    return _BUILDERS[protocol](payload, rng).astype(np.uint8)
