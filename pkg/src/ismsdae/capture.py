"""Synthetic capture campaigns, emission extraction and capture files.

A capture emulates one recording campaign: several packets of a single
protocol at a protocol-typical channel, separated by near-silent gaps, at
100 MS/s around 2450 MHz.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError
from .packets import PAYLOAD_BOUNDS, build_packet
from .waveforms import (
    BT_MODULATOR,
    CENTER_FREQ_HZ,
    NRF_MODULATOR,
    OFDM_CP_LEN,
    OFDM_OCCUPIED_BW_HZ,
    OFDM_SUBCARRIERS,
    SAMPLE_RATE_HZ,
    ZIGBEE_CHIP_RATE_HZ,
    ProtocolClass,
    gen_gfsk,
    gen_ofdm,
    gen_oqpsk_dsss,
)

PAYLOAD_DISTRIBUTIONS = ("uniform_random", "repeating_pattern", "incrementing")

# Residual receiver floor of the "clean" recordings, relative to unit signal power.
NOISE_FLOOR_DB = -90.0

DETECT_WINDOW = 64
DEFAULT_THRESHOLD_DB = -30.0
DEFAULT_PRE_BUFFER = 128


@dataclass(frozen=True)
class TrafficProfile:
    payload_len_range: tuple = (1, 16)
    payload_distribution: str = "uniform_random"
    inter_packet_gap_range: tuple = (10e-6, 50e-6)  # seconds
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "payload_len_range", tuple(int(v) for v in self.payload_len_range))
        object.__setattr__(self, "inter_packet_gap_range",
                           tuple(float(v) for v in self.inter_packet_gap_range))
        if self.payload_distribution not in PAYLOAD_DISTRIBUTIONS:
            raise ParameterError(f"unknown payload distribution {self.payload_distribution!r}")
        lo, hi = self.payload_len_range
        glo, ghi = self.inter_packet_gap_range
        if lo > hi or glo > ghi or glo < 0:
            raise ParameterError("ranges must be ordered and nonnegative")
        if not self.name:
            object.__setattr__(self, "name", self.payload_distribution)

    def validate_for(self, protocol):
        lo, hi = self.payload_len_range
        plo, phi = PAYLOAD_BOUNDS[ProtocolClass.parse(protocol)]
        if lo < plo or hi > phi:
            raise ParameterError(
                f"payload range {self.payload_len_range} outside {protocol} bounds {(plo, phi)}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# Payload-length ranges per protocol used by the stock profiles.
DEFAULT_PAYLOAD_RANGES = {
    ProtocolClass.BT: (4, 27),
    ProtocolClass.WIFI: (40, 200),
    ProtocolClass.NRF: (4, 32),
    ProtocolClass.ZBEE: (4, 24),
}


def default_profiles(protocol):
    """One stock profile per payload distribution for ``protocol``."""
    protocol = ProtocolClass.parse(protocol)
    return [TrafficProfile(DEFAULT_PAYLOAD_RANGES[protocol], dist)
            for dist in PAYLOAD_DISTRIBUTIONS]


@dataclass
class Emission:
    protocol: ProtocolClass
    channel_offset_hz: float | None
    samples: np.ndarray
    pre_buffer_len: int = 0
    sample_rate_hz: float = SAMPLE_RATE_HZ
    source_id: str = ""
    start_index: int = 0

    def __len__(self):
        return self.samples.size

    def with_samples(self, samples, **changes):
        return replace(self, samples=samples, **changes)


@dataclass
class CaptureStream:
    protocol: ProtocolClass
    samples: np.ndarray
    channel_offset_hz: float
    traffic_profile: TrafficProfile
    seed: int
    sample_rate_hz: float = SAMPLE_RATE_HZ
    center_freq_hz: float = CENTER_FREQ_HZ
    # Ground-truth (start, stop) sample spans of the synthesized packets.
    packet_spans: tuple = field(default=())

    @property
    def capture_id(self):
        return f"{self.protocol.label}-{self.traffic_profile.name}-{self.seed}"


def channel_offsets(protocol) -> np.ndarray:
    """Candidate carrier offsets (Hz from 2450 MHz) typical for ``protocol``."""
    protocol = ProtocolClass.parse(protocol)
    if protocol is ProtocolClass.BT:
        mhz = np.arange(2402, 2481)
    elif protocol is ProtocolClass.NRF:
        mhz = np.arange(2400, 2526)
        mhz = mhz[np.abs(mhz - 2450) < 50]
    elif protocol is ProtocolClass.ZBEE:
        mhz = 2405 + 5 * np.arange(16)
    else:
        mhz = np.array([2412, 2437, 2462])
    return (mhz - 2450) * 1e6


def synthesize_emission(protocol, payload, rng_seed, sample_rate_hz=SAMPLE_RATE_HZ):
    """Clean complex-baseband waveform of one packet, centered at 0 Hz."""
    protocol = ProtocolClass.parse(protocol)
    bits = build_packet(protocol, payload, rng_seed)
    if protocol is ProtocolClass.BT:
        m = BT_MODULATOR
        return gen_gfsk(bits, m.symbol_rate_hz, m.deviation_hz, m.gaussian_bt, sample_rate_hz)
    if protocol is ProtocolClass.NRF:
        m = NRF_MODULATOR
        return gen_gfsk(bits, m.symbol_rate_hz, m.deviation_hz, m.gaussian_bt, sample_rate_hz)
    if protocol is ProtocolClass.ZBEE:
        return gen_oqpsk_dsss(bits, ZIGBEE_CHIP_RATE_HZ, sample_rate_hz)
    return gen_ofdm(bits, OFDM_SUBCARRIERS, OFDM_CP_LEN, OFDM_OCCUPIED_BW_HZ,
                    sample_rate_hz, preamble=True)


def _payload_source(traffic, rng):
    lo, hi = traffic.payload_len_range
    dist = traffic.payload_distribution
    pattern = rng.integers(0, 256, size=int(rng.integers(1, 5)), dtype=np.uint8)
    counter = int(rng.integers(0, 256))

    def next_payload():
        nonlocal counter
        n = int(rng.integers(lo, hi + 1))
        if dist == "uniform_random":
            return rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
        if dist == "repeating_pattern":
            return np.resize(pattern, n).tobytes()
        out = ((counter + np.arange(n)) % 256).astype(np.uint8).tobytes()
        counter = (counter + n) % 256
        return out

    return next_payload


def record_capture(protocol, traffic, duration_s, rng_seed, sample_rate_hz=SAMPLE_RATE_HZ):
    """Synthesize one clean capture campaign.

    Packets are laid out back to back with gaps drawn from the profile, the
    whole stream is mixed to a random protocol-typical channel, and a
    residual floor at ``NOISE_FLOOR_DB`` is added.
    """
    protocol = ProtocolClass.parse(protocol)
    traffic.validate_for(protocol)
    if not np.isfinite(duration_s) or duration_s <= 0:
        raise ParameterError(f"duration must be positive, got {duration_s}")
    rng = np.random.default_rng(rng_seed)
    n_total = int(round(duration_s * sample_rate_hz))
    offset = float(rng.choice(channel_offsets(protocol)))
    next_payload = _payload_source(traffic, rng)
    glo, ghi = traffic.inter_packet_gap_range

    def gap():
        return int(round(rng.uniform(glo, ghi) * sample_rate_hz))

    pieces, spans = [], []
    pos = gap()
    while True:
        wave = synthesize_emission(protocol, next_payload(), int(rng.integers(2**32)),
                                   sample_rate_hz)
        if pos + wave.size > n_total:
            break
        pieces.append((pos, wave))
        spans.append((pos, pos + wave.size))
        pos += wave.size + gap()
    if len(spans) < 2:
        raise ParameterError(
            f"{duration_s * 1e6:.1f} us holds {len(spans)} {protocol.name} packet(s); need at least 2"
        )

    samples = np.zeros(n_total, dtype=np.complex128)
    for start, wave in pieces:
        samples[start:start + wave.size] = wave
    n = np.arange(n_total)
    samples *= np.exp(2j * np.pi * offset * n / sample_rate_hz)
    floor_std = np.sqrt(10 ** (NOISE_FLOOR_DB / 10) / 2)
    samples += floor_std * (rng.standard_normal(n_total) + 1j * rng.standard_normal(n_total))
    return CaptureStream(protocol, samples, offset, traffic, int(rng_seed),
                         sample_rate_hz=sample_rate_hz, packet_spans=tuple(spans))


def smoothed_power(samples, window=DETECT_WINDOW):
    p = np.abs(np.asarray(samples)) ** 2
    if p.size == 0:
        return p
    return np.convolve(p, np.ones(window) / window, mode="same")


def extract_emissions(stream, threshold_db=DEFAULT_THRESHOLD_DB, pre_buffer=DEFAULT_PRE_BUFFER,
                      window=DETECT_WINDOW):
    """Split a capture into emissions by thresholding moving-average power.

    ``threshold_db`` is relative to the peak of the smoothed power. Each
    region is trimmed to its first/last sample whose instantaneous power
    clears the threshold, then extended backwards by ``pre_buffer`` samples
    (clamped at the stream start and at the previous emission's end).
    """
    if not -80 < threshold_db < 0:
        raise ParameterError(f"threshold_db must be in (-80, 0), got {threshold_db}")
    if pre_buffer < 0:
        raise ParameterError("pre_buffer must be >= 0")
    samples = np.asarray(stream.samples)
    sp = smoothed_power(samples, window)
    if sp.size == 0 or sp.max() <= 0:
        return []
    thr = sp.max() * 10 ** (threshold_db / 10)
    inst = np.abs(samples) ** 2

    above = np.concatenate([[False], sp >= thr, [False]])
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    emissions = []
    prev_end = 0
    for k, (a, b) in enumerate(zip(edges[0::2], edges[1::2])):
        hits = np.flatnonzero(inst[a:b] >= thr)
        if hits.size == 0:
            continue
        start, stop = a + hits[0], a + hits[-1] + 1
        first = max(start - pre_buffer, prev_end)
        emissions.append(Emission(
            protocol=stream.protocol,
            channel_offset_hz=stream.channel_offset_hz,
            samples=samples[first:stop].copy(),
            pre_buffer_len=int(start - first),
            sample_rate_hz=stream.sample_rate_hz,
            source_id=f"{stream.capture_id}#{len(emissions)}",
            start_index=int(first),
        ))
        prev_end = stop
    return emissions


META_SUFFIX = ".sigmeta.json"
DATA_SUFFIX = ".iq"


def save_capture(stream, stem):
    """Write ``<stem>.sigmeta.json`` and ``<stem>.iq`` (LE float32 interleaved I/Q)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    iq = np.empty(2 * stream.samples.size, dtype="<f4")
    iq[0::2] = stream.samples.real
    iq[1::2] = stream.samples.imag
    meta = {
        "protocol": stream.protocol.name,
        "sample_rate": stream.sample_rate_hz,
        "center_freq": stream.center_freq_hz,
        "channel_offset": stream.channel_offset_hz,
        "seed": stream.seed,
        "traffic_profile": stream.traffic_profile.to_dict(),
        "datatype": "cf32_le",
        "num_samples": int(stream.samples.size),
        "packet_spans": [list(s) for s in stream.packet_spans],
    }
    Path(str(stem) + DATA_SUFFIX).write_bytes(iq.tobytes())
    Path(str(stem) + META_SUFFIX).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return stem


def load_capture(stem):
    stem = Path(str(stem).removesuffix(META_SUFFIX).removesuffix(DATA_SUFFIX))
    try:
        meta = json.loads(Path(str(stem) + META_SUFFIX).read_text())
        raw = np.fromfile(str(stem) + DATA_SUFFIX, dtype="<f4")
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read capture {stem}: {exc}") from exc
    if raw.size % 2 or raw.size // 2 != meta.get("num_samples", raw.size // 2):
        raise FormatError(f"capture {stem} sample count does not match its metadata")
    samples = (raw[0::2] + 1j * raw[1::2]).astype(np.complex128)
    return CaptureStream(
        protocol=ProtocolClass[meta["protocol"]],
        samples=samples,
        channel_offset_hz=float(meta["channel_offset"]),
        traffic_profile=TrafficProfile.from_dict(meta["traffic_profile"]),
        seed=int(meta["seed"]),
        sample_rate_hz=float(meta["sample_rate"]),
        center_freq_hz=float(meta["center_freq"]),
        packet_spans=tuple(tuple(s) for s in meta.get("packet_spans", [])),
    )


def list_captures(directory):
    return sorted(Path(directory).glob("*" + META_SUFFIX))
