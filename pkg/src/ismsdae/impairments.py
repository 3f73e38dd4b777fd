"""Policy-driven receiver impairments applied to clean emissions.

Stages run in a fixed order: gain, time jitter, channel retuning,
frequency jitter, then additive white Gaussian noise. Each stage draws
from its own child of the policy's seed sequence, so the draws of one
stage never depend on another stage's configuration.
"""

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ParameterError

CHANNEL_MODES = ("keep", "randomize", "baseband")
RANDOM_CHANNEL_SPAN_HZ = 45e6

_STAGES = ("time", "channel", "freq", "noise")


@dataclass(frozen=True)
class ImpairmentPolicy:
    target_snr_db: float | None = None
    freq_jitter_std_hz: float = 0.0
    time_jitter_max_samples: int = 0
    channel_mode: str = "keep"
    gain_db: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.target_snr_db is not None and not -20 <= self.target_snr_db <= 80:
            raise ParameterError(f"target_snr_db {self.target_snr_db} outside [-20, 80]")
        if not self.freq_jitter_std_hz >= 0:
            raise ParameterError("freq_jitter_std_hz must be >= 0")
        if int(self.time_jitter_max_samples) != self.time_jitter_max_samples or \
                self.time_jitter_max_samples < 0:
            raise ParameterError("time_jitter_max_samples must be a nonnegative integer")
        if self.channel_mode not in CHANNEL_MODES:
            raise ParameterError(f"channel_mode must be one of {CHANNEL_MODES}")
        if not math.isfinite(self.gain_db):
            raise ParameterError("gain_db must be finite")

    @classmethod
    def default(cls, **overrides):
        """Stock augmentation: 50 kHz frequency jitter, +-32 sample time jitter, baseband."""
        base = dict(freq_jitter_std_hz=50e3, time_jitter_max_samples=32, channel_mode="baseband")
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)


def load_policy(path):
    return ImpairmentPolicy.from_dict(json.loads(Path(path).read_text()))


def save_policy(policy, path):
    Path(path).write_text(json.dumps(policy.to_dict(), indent=2, sort_keys=True) + "\n")


def stage_rngs(seed, index=0):
    """Independent generators for each randomized stage of one emission."""
    children = np.random.SeedSequence([int(seed), int(index)]).spawn(len(_STAGES))
    return {name: np.random.default_rng(ss) for name, ss in zip(_STAGES, children)}


def measure_power(samples) -> float:
    x = np.asarray(samples)
    if x.size == 0:
        raise ParameterError("cannot measure power of an empty sequence")
    return float(np.mean(x.real ** 2 + x.imag ** 2))


def add_awgn(samples, target_snr_db, rng):
    """Add circular complex Gaussian noise at ``target_snr_db`` below the signal power.

    ``target_snr_db=None`` or ``+inf`` disables the noise.
    """
    x = np.asarray(samples, dtype=np.complex128)
    if target_snr_db is None or target_snr_db == math.inf:
        return x.copy()
    p = measure_power(x)
    if p <= 0:
        raise DegenerateInputError("signal has zero power; SNR is undefined")
    std = math.sqrt(p / (2 * 10 ** (target_snr_db / 10)))
    noise = rng.standard_normal((2, x.size))
    return x + std * (noise[0] + 1j * noise[1])


def apply_freq_shift(samples, offset_hz, sample_rate_hz):
    x = np.asarray(samples, dtype=np.complex128)
    if not abs(offset_hz) < sample_rate_hz / 2:
        raise ParameterError(f"offset {offset_hz} Hz aliases at {sample_rate_hz} S/s")
    if offset_hz == 0:
        return x.copy()
    n = np.arange(x.size)
    return x * np.exp(2j * np.pi * offset_hz * n / sample_rate_hz)


def wrap_frequency(offset_hz, sample_rate_hz):
    """Equivalent discrete-time offset in [-fs/2, fs/2)."""
    return (offset_hz + sample_rate_hz / 2) % sample_rate_hz - sample_rate_hz / 2


def shift_samples(x, shift):
    """Delay (shift > 0) or advance (shift < 0) with zero fill, keeping length."""
    out = np.zeros_like(x)
    if shift >= 0:
        out[shift:] = x[: x.size - shift]
    else:
        out[: x.size + shift] = x[-shift:]
    return out


def apply_time_jitter(emission, max_samples, rng):
    if max_samples < 0 or max_samples >= len(emission):
        raise ParameterError(
            f"time jitter {max_samples} must be in [0, emission length {len(emission)})"
        )
    if max_samples == 0:
        return emission
    shift = int(rng.integers(-max_samples, max_samples + 1))
    return emission.with_samples(
        shift_samples(emission.samples, shift),
        pre_buffer_len=max(0, emission.pre_buffer_len + shift),
    )


def apply_freq_jitter(emission, std_hz, sample_rate_hz, rng):
    if std_hz < 0:
        raise ParameterError("std_hz must be >= 0")
    if std_hz == 0:
        return emission
    offset = float(rng.normal(0.0, std_hz))
    return emission.with_samples(apply_freq_shift(emission.samples, offset, sample_rate_hz))


def retune_channel(emission, mode, rng):
    """Move the emission to baseband, to a random channel, or leave it."""
    if mode == "keep":
        return emission
    if mode not in CHANNEL_MODES:
        raise ParameterError(f"unknown channel mode {mode!r}")
    current = emission.channel_offset_hz
    if current is None:
        raise ParameterError(f"channel mode {mode!r} needs a known channel offset")
    fs = emission.sample_rate_hz
    target = 0.0 if mode == "baseband" else float(
        rng.uniform(-RANDOM_CHANNEL_SPAN_HZ, RANDOM_CHANNEL_SPAN_HZ))
    delta = wrap_frequency(target - current, fs)
    if delta == -fs / 2:
        raise ParameterError("retune lands exactly on the Nyquist edge")
    return emission.with_samples(apply_freq_shift(emission.samples, delta, fs),
                                 channel_offset_hz=target)


def apply_gain(samples, gain_db):
    if not math.isfinite(gain_db):
        raise ParameterError("gain must be finite")
    x = np.asarray(samples, dtype=np.complex128)
    if gain_db == 0:
        return x.copy()
    return x * 10 ** (gain_db / 20)


def apply_policy(emission, policy, index=0):
    """Run every stage of ``policy`` over one emission.

    ``index`` selects the emission's slice of the policy's randomness, so a
    parallel map over emissions reproduces a sequential run exactly.
    """
    rngs = stage_rngs(policy.rng_seed, index)
    out = emission.with_samples(apply_gain(emission.samples, policy.gain_db))
    out = apply_time_jitter(out, policy.time_jitter_max_samples, rngs["time"])
    out = retune_channel(out, policy.channel_mode, rngs["channel"])
    out = apply_freq_jitter(out, policy.freq_jitter_std_hz, out.sample_rate_hz, rngs["freq"])
    return out.with_samples(add_awgn(out.samples, policy.target_snr_db, rngs["noise"]))
