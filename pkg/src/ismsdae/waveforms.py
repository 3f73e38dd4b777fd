"""Complex-baseband modulators for the four ISM protocol classes.

All generators are pure functions of their arguments. Outputs are
``complex128`` arrays at the requested sample rate, normalized to unit
average power (GFSK and O-QPSK are constant envelope by construction).
"""

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ParameterError

SAMPLE_RATE_HZ = 100e6
CENTER_FREQ_HZ = 2450e6


class ProtocolClass(enum.IntEnum):
    BT = 0
    WIFI = 1
    NRF = 2
    ZBEE = 3

    @property
    def label(self) -> str:
        return CLASS_LABELS[self]

    @classmethod
    def parse(cls, value) -> "ProtocolClass":
        if isinstance(value, ProtocolClass):
            return value
        if isinstance(value, str):
            key = value.strip().upper()
            aliases = {"ZIGBEE": "ZBEE", "BLUETOOTH": "BT"}
            return cls[aliases.get(key, key)]
        return cls(int(value))


CLASS_LABELS = {
    ProtocolClass.BT: "BT",
    ProtocolClass.WIFI: "WiFi",
    ProtocolClass.NRF: "NRF",
    ProtocolClass.ZBEE: "ZBee",
}


@dataclass(frozen=True)
class GfskConfig:
    symbol_rate_hz: float = 1e6
    deviation_hz: float = 160e3
    gaussian_bt: float = 0.5


# BT and NRF deliberately share one modulator; only their framing differs.
BT_MODULATOR = GfskConfig()
NRF_MODULATOR = GfskConfig()

ZIGBEE_CHIP_RATE_HZ = 2e6

OFDM_NATIVE_RATE_HZ = 20e6
OFDM_SUBCARRIERS = 64
OFDM_CP_LEN = 16
# 52 occupied subcarriers (+-1..+-26) at 312.5 kHz spacing.
OFDM_OCCUPIED_BW_HZ = 16.6e6


def _check_rates(rate_hz, sample_rate_hz, what):
    if not (np.isfinite(rate_hz) and rate_hz > 0):
        raise ParameterError(f"{what} must be positive, got {rate_hz}")
    if not np.isfinite(sample_rate_hz) or sample_rate_hz < 8 * rate_hz:
        raise ParameterError(
            f"sample rate {sample_rate_hz} must be at least 8x the {what} {rate_hz}"
        )


def gaussian_taps(gaussian_bt: float, samples_per_symbol: float, span_symbols: int = 4):
    """Unit-sum Gaussian pulse-shaping taps for a bandwidth-time product."""
    sigma = np.sqrt(np.log(2.0)) / (2 * np.pi * gaussian_bt) * samples_per_symbol
    half = int(np.ceil(span_symbols * samples_per_symbol / 2))
    t = np.arange(-half, half + 1)
    taps = np.exp(-0.5 * (t / sigma) ** 2)
    return taps / taps.sum()


def gen_gfsk(bits, symbol_rate_hz, deviation_hz, gaussian_bt, sample_rate_hz):
    """Gaussian frequency-shift keying.

    Bit 1 maps to ``+deviation_hz`` and bit 0 to ``-deviation_hz``. The NRZ
    frequency trajectory is edge-extended before Gaussian filtering so runs
    of identical bits sit at the full deviation from the first sample, and
    the phase starts at zero.
    """
    _check_rates(symbol_rate_hz, sample_rate_hz, "symbol rate")
    if not 0 < gaussian_bt <= 1:
        raise ParameterError(f"gaussian_bt must be in (0, 1], got {gaussian_bt}")
    bits = np.asarray(bits, dtype=np.int8).ravel()
    if bits.size == 0:
        return np.zeros(0, dtype=np.complex128)

    sps_f = sample_rate_hz / symbol_rate_hz
    n = int(round(bits.size * sps_f))
    sym_idx = np.minimum((np.arange(n) * symbol_rate_hz / sample_rate_hz).astype(np.int64),
                         bits.size - 1)
    nrz = 2.0 * bits[sym_idx] - 1.0

    taps = gaussian_taps(gaussian_bt, sps_f)
    half = taps.size // 2
    freq = np.convolve(np.pad(nrz, half, mode="edge"), taps, mode="valid")

    step = 2 * np.pi * deviation_hz / sample_rate_hz
    phase = np.empty(n)
    phase[0] = 0.0
    np.cumsum(freq[:-1] * step, out=phase[1:])
    return np.exp(1j * phase)


# IEEE 802.15.4 2.4 GHz chip sequence for data symbol 0 (c0 first).
_ZB_SYMBOL0 = "11011001110000110101001000101110"


def _zigbee_chip_table() -> np.ndarray:
    base = np.array([int(c) for c in _ZB_SYMBOL0], dtype=np.int8)
    table = np.empty((16, 32), dtype=np.int8)
    for s in range(8):
        table[s] = np.roll(base, 4 * s)
    odd = np.zeros(32, dtype=np.int8)
    odd[1::2] = 1
    table[8:] = table[:8] ^ odd
    return table


ZIGBEE_CHIPS = _zigbee_chip_table()


def bits_to_zigbee_symbols(bits) -> np.ndarray:
    """Group bits four at a time, first bit least significant."""
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size % 4:
        raise ParameterError(f"bit count {bits.size} is not a multiple of 4")
    return bits.reshape(-1, 4) @ np.array([1, 2, 4, 8])


def gen_oqpsk_dsss(bits, chip_rate_hz, sample_rate_hz):
    """802.15.4-style O-QPSK with 32-chip spreading and half-sine pulses.

    Even chips ride the I rail and odd chips the Q rail. Each chip is a
    half-sine spanning two chip periods; Q is delayed by one chip period, so
    the output carries a one-chip tail after the last full symbol.
    """
    _check_rates(chip_rate_hz, sample_rate_hz, "chip rate")
    spc_f = sample_rate_hz / chip_rate_hz
    spc = int(round(spc_f))
    if abs(spc - spc_f) > 1e-9 * spc_f:
        raise ParameterError("sample rate must be an integer multiple of the chip rate")
    symbols = bits_to_zigbee_symbols(bits)
    if symbols.size == 0:
        return np.zeros(0, dtype=np.complex128)

    chips = ZIGBEE_CHIPS[symbols].ravel().astype(np.float64) * 2 - 1
    n_chips = chips.size
    n = n_chips * spc + spc
    pulse = np.sin(np.pi * np.arange(2 * spc) / (2 * spc))

    i_rail = np.zeros(n)
    q_rail = np.zeros(n)
    # Rails are sums of non-overlapping pulses, so an outer product reshapes cleanly.
    i_rail[: n_chips * spc] = np.outer(chips[0::2], pulse).ravel()
    q_rail[spc : spc + n_chips * spc] = np.outer(chips[1::2], pulse).ravel()
    return i_rail + 1j * q_rail


# 802.11 legacy short/long training sequences on subcarriers -26..26.
_STF = np.zeros(53, dtype=np.complex128)
for _k, _v in {-24: 1, -20: -1, -16: 1, -12: -1, -8: -1, -4: 1,
               4: -1, 8: -1, 12: 1, 16: 1, 20: 1, 24: 1}.items():
    _STF[_k + 26] = _v * (1 + 1j) * np.sqrt(13 / 6)
_LTF = np.array(
    [1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1,
     0, 1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1,
     1, 1, 1],
    dtype=np.complex128,
)


def _centered_to_bins(values, n_fft):
    spectrum = np.zeros(n_fft, dtype=np.complex128)
    ks = np.arange(-26, 27)
    spectrum[ks % n_fft] = values
    return spectrum


def ofdm_training_preamble() -> np.ndarray:
    """Legacy STF (10 short periods) followed by LTF (guard + 2 long symbols), 20 MHz."""
    stf_period = np.fft.ifft(_centered_to_bins(_STF, 64)) * 64 / np.sqrt(52)
    stf = np.tile(stf_period[:16], 10)
    ltf_sym = np.fft.ifft(_centered_to_bins(_LTF, 64)) * 64 / np.sqrt(52)
    ltf = np.concatenate([ltf_sym[-32:], ltf_sym, ltf_sym])
    return np.concatenate([stf, ltf])


def occupied_subcarriers(n_subcarriers, occupied_bw_hz, native_rate_hz=OFDM_NATIVE_RATE_HZ):
    """Signed subcarrier indices (DC excluded) inside the occupied bandwidth."""
    spacing = native_rate_hz / n_subcarriers
    kmax = int(np.floor(occupied_bw_hz / 2 / spacing + 1e-9))
    kmax = min(kmax, n_subcarriers // 2 - 1)
    return np.array([k for k in range(-kmax, kmax + 1) if k != 0], dtype=np.int64)


def qpsk_map(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.float64).reshape(-1, 2)
    return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)


def ofdm_native(bits, n_subcarriers, cp_len, subcarriers, preamble=False):
    """OFDM symbols at the native rate (one sample per subcarrier spacing / N).

    ``subcarriers`` lists the signed indices carrying QPSK data. The final
    symbol is zero-padded when the bit count does not fill it.
    """
    if n_subcarriers < 2 or n_subcarriers & (n_subcarriers - 1):
        raise ParameterError(f"n_subcarriers must be a power of two, got {n_subcarriers}")
    if not 0 <= cp_len < n_subcarriers:
        raise ParameterError(f"cp_len must be in [0, {n_subcarriers}), got {cp_len}")
    subcarriers = np.asarray(subcarriers, dtype=np.int64)
    if subcarriers.size == 0:
        raise ParameterError("no occupied subcarriers")
    bits = np.asarray(bits, dtype=np.int8).ravel()
    per_symbol = 2 * subcarriers.size
    parts = []
    if preamble:
        if n_subcarriers != 64:
            raise ParameterError("training preamble is defined for 64 subcarriers only")
        parts.append(ofdm_training_preamble())
    if bits.size == 0 and preamble:
        return np.concatenate(parts)
    if bits.size < per_symbol:
        raise ParameterError(
            f"need at least {per_symbol} bits for one OFDM symbol, got {bits.size}"
        )
    n_sym = -(-bits.size // per_symbol)
    padded = np.zeros(n_sym * per_symbol, dtype=np.int8)
    padded[: bits.size] = bits
    data = qpsk_map(padded).reshape(n_sym, subcarriers.size)
    grid = np.zeros((n_sym, n_subcarriers), dtype=np.complex128)
    grid[:, subcarriers % n_subcarriers] = data
    body = np.fft.ifft(grid, axis=1) * n_subcarriers / np.sqrt(subcarriers.size)
    symbols = np.concatenate([body[:, n_subcarriers - cp_len:], body], axis=1)
    parts.append(symbols.ravel())
    return np.concatenate(parts)


def resample_rational(x, rate_in_hz, rate_out_hz):
    """Polyphase resampling by the exact rational ratio rate_out/rate_in."""
    ratio = Fraction(rate_out_hz / rate_in_hz).limit_denominator(1000)
    if ratio == 1:
        return np.asarray(x, dtype=np.complex128)
    return sps.resample_poly(x, ratio.numerator, ratio.denominator)


def gen_ofdm(bits, n_subcarriers, cp_len, occupied_bw_hz, sample_rate_hz, *,
             preamble=False, subcarriers=None, native_rate_hz=OFDM_NATIVE_RATE_HZ):
    """QPSK-loaded OFDM, built at ``native_rate_hz`` and resampled to ``sample_rate_hz``.

    ``subcarriers`` overrides the set derived from ``occupied_bw_hz``.
    """
    if subcarriers is None:
        subcarriers = occupied_subcarriers(n_subcarriers, occupied_bw_hz, native_rate_hz)
    native = ofdm_native(bits, n_subcarriers, cp_len, subcarriers, preamble=preamble)
    return resample_rational(native, native_rate_hz, sample_rate_hz)
