"""Burst sampling, the interleave transform, and labeled burst datasets.

Binary dataset layout (all little-endian)::

    b"ISMB" | u16 version=1 | u16 feature_len | u32 n_records | u8 n_classes
    n_classes x (u8 len, utf-8 class name)
    u8 burst_mode | u8 channel_mode | f32 snr_db (NaN = none) | u64 seed
    n_records x (u8 label, feature_len x f32)
"""

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .capture import extract_emissions
from .errors import DatasetBuildError, DegenerateInputError, FormatError, ParameterError
from .impairments import CHANNEL_MODES, apply_policy
from .seeding import derive_seed
from .waveforms import CLASS_LABELS, ProtocolClass

BURST_LEN = 128
BURST_MODES = ("start", "random")
DATASET_MAGIC = b"ISMB"
DATASET_VERSION = 1
DEFAULT_LABEL_MAP = tuple(CLASS_LABELS[p] for p in ProtocolClass)
# Short pre-buffer for dataset building so a 128-sample start burst holds the rising
# edge plus most of a symbol instead of only the silent lead-in.
DATASET_PRE_BUFFER = 16


@dataclass
class Burst:
    label: ProtocolClass
    samples: np.ndarray
    origin: str
    source_id: str
    offset: int


@dataclass(frozen=True)
class DatasetRecord:
    features: np.ndarray
    label: int


@dataclass(eq=False)
class BurstDataset:
    """Interleaved bursts as a float32 feature matrix plus labels.

    ``source_ids`` and ``offsets`` are in-memory provenance only; they are
    not part of the file format and do not take part in equality.
    """

    features: np.ndarray
    labels: np.ndarray
    label_map: tuple = DEFAULT_LABEL_MAP
    burst_mode: str = "random"
    channel_mode: str = "baseband"
    snr_db: float | None = None
    seed: int = 0
    source_ids: tuple = field(default=())
    offsets: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise ParameterError("features must be (n_records, feature_len) matching labels")
        if self.labels.size and self.labels.max() >= len(self.label_map):
            raise ParameterError("label outside label_map")
        if self.burst_mode not in BURST_MODES:
            raise ParameterError(f"burst_mode must be one of {BURST_MODES}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ParameterError(f"channel_mode must be one of {CHANNEL_MODES}")
        self.label_map = tuple(self.label_map)

    def __len__(self):
        return self.labels.size

    def __iter__(self):
        for x, y in zip(self.features, self.labels):
            yield DatasetRecord(x, int(y))

    @property
    def feature_len(self):
        return self.features.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.label_map))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return BurstDataset(
            self.features[idx], self.labels[idx], self.label_map, self.burst_mode,
            self.channel_mode, self.snr_db, self.seed,
            tuple(self.source_ids[i] for i in idx) if self.source_ids else (),
            None if self.offsets is None else self.offsets[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, BurstDataset):
            return NotImplemented
        snr_eq = (self.snr_db is None and other.snr_db is None) or (
            self.snr_db is not None and other.snr_db is not None
            and np.float32(self.snr_db) == np.float32(other.snr_db))
        return (self.label_map == other.label_map and self.burst_mode == other.burst_mode
                and self.channel_mode == other.channel_mode and snr_eq
                and self.seed == other.seed
                and np.array_equal(self.labels, other.labels)
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())


def sample_start_burst(emission, length=BURST_LEN):
    """First ``length`` samples of the emission record, or None if it is too short."""
    if len(emission) < length:
        return None
    return Burst(emission.protocol, emission.samples[:length].copy(), "start",
                 emission.source_id, 0)


def sample_random_bursts(emission, length, n, rng):
    """``n`` bursts at offsets drawn uniformly from [0, len - length]; overlap allowed."""
    if n < 0:
        raise ParameterError("n must be >= 0")
    if len(emission) < length:
        return None
    offsets = rng.integers(0, len(emission) - length + 1, size=n)
    return [Burst(emission.protocol, emission.samples[o:o + length].copy(), "random",
                  emission.source_id, int(o)) for o in offsets]


def normalize_rms(burst):
    x = np.asarray(burst.samples, dtype=np.complex128)
    p = float(np.mean(x.real ** 2 + x.imag ** 2)) if x.size else 0.0
    if p <= 0:
        raise DegenerateInputError("burst has zero power")
    return Burst(burst.label, x / math.sqrt(p), burst.origin, burst.source_id, burst.offset)


def interleave(samples) -> np.ndarray:
    c = np.asarray(samples)
    out = np.empty(2 * c.size, dtype=np.float64)
    out[0::2] = c.real
    out[1::2] = c.imag
    return out


def deinterleave(features) -> np.ndarray:
    f = np.asarray(features)
    if f.shape[-1] % 2:
        raise ParameterError("feature length must be even")
    return f[..., 0::2] + 1j * f[..., 1::2]


def _class_emissions(captures, protocol, pre_buffer):
    ems = []
    for cap in captures:
        if cap.protocol == protocol:
            ems.extend(extract_emissions(cap, pre_buffer=pre_buffer))
    return ems


def build_dataset(captures, policy, mode, per_class, length=BURST_LEN, seed=0,
                  pre_buffer=DATASET_PRE_BUFFER, label_map=DEFAULT_LABEL_MAP):
    """Impair emissions, sample bursts, normalize, interleave and shuffle.

    Start mode takes one burst from the head of each emission, so it needs
    ``per_class`` usable emissions per class. Random mode spreads
    ``per_class`` draws evenly over the class's emissions.
    """
    if mode not in BURST_MODES:
        raise ParameterError(f"mode must be one of {BURST_MODES}")
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    if policy.channel_mode not in ("randomize", "baseband"):
        raise ParameterError("dataset channel_mode must be 'randomize' or 'baseband'")

    feats, labels, ids, offs = [], [], [], []
    for protocol in ProtocolClass:
        ems = [e for e in _class_emissions(captures, protocol, pre_buffer) if len(e) >= length]
        if not ems:
            raise DatasetBuildError(f"no usable {protocol.name} emissions", protocol)
        if mode == "start" and len(ems) < per_class:
            raise DatasetBuildError(
                f"start mode needs {per_class} {protocol.name} emissions, found {len(ems)}",
                protocol)
        item_policy_seed = derive_seed(seed, "impair", protocol.name, policy.rng_seed)
        pol = type(policy)(**{**policy.to_dict(), "rng_seed": item_policy_seed})
        if mode == "start":
            plan = [(i, 1) for i in range(per_class)]
        else:
            q, r = divmod(per_class, len(ems))
            plan = [(i, q + (i < r)) for i in range(len(ems)) if q + (i < r)]
        for i, count in plan:
            em = apply_policy(ems[i], pol, index=i)
            if mode == "start":
                bursts = [sample_start_burst(em, length)]
            else:
                rng = np.random.default_rng(derive_seed(seed, "offsets", protocol.name, i))
                bursts = sample_random_bursts(em, length, count, rng)
            for b in bursts:
                b = normalize_rms(b)
                feats.append(interleave(b.samples))
                labels.append(int(protocol))
                ids.append(b.source_id)
                offs.append(b.offset)

    order = np.random.default_rng(derive_seed(seed, "shuffle")).permutation(len(labels))
    return BurstDataset(
        np.asarray(feats, dtype=np.float32)[order],
        np.asarray(labels, dtype=np.uint8)[order],
        label_map, mode, policy.channel_mode, policy.target_snr_db, int(seed),
        tuple(ids[i] for i in order), np.asarray(offs, dtype=np.int64)[order],
    )


def split(dataset, train_fraction, seed):
    """Stratified partition into (train, rest).

    The overall train size is round(fraction * n). Each class first gets
    floor(fraction * class_count); leftover slots go to classes chosen by
    largest remainder with seeded tie-breaking.
    """
    if not 0 < train_fraction < 1:
        raise ParameterError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    counts = dataset.class_counts()
    present = np.flatnonzero(counts)
    if np.any(counts[present] < 2):
        bad = [dataset.label_map[c] for c in present if counts[c] < 2]
        raise ParameterError(f"classes with fewer than 2 records cannot be split: {bad}")
    target_total = int(round(train_fraction * len(dataset)))
    exact = train_fraction * counts[present]
    take = np.floor(exact).astype(np.int64)
    remainder = exact - take
    tiebreak = rng.permutation(present.size)
    order = np.lexsort((tiebreak, -remainder))
    for j in order[: max(0, target_total - int(take.sum()))]:
        take[j] += 1

    train_idx, rest_idx = [], []
    for c, k in zip(present, take):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        train_idx.extend(idx[:k])
        rest_idx.extend(idx[k:])
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(rest_idx))


_BURST_CODES = {m: i for i, m in enumerate(BURST_MODES)}
_CHANNEL_CODES = {m: i for i, m in enumerate(CHANNEL_MODES)}


def dataset_bytes(ds) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HHIB", DATASET_VERSION, ds.feature_len, len(ds), len(ds.label_map)))
    for name in ds.label_map:
        raw = name.encode()
        buf.write(struct.pack("<B", len(raw)) + raw)
    snr = float("nan") if ds.snr_db is None else ds.snr_db
    buf.write(struct.pack("<BBfQ", _BURST_CODES[ds.burst_mode],
                          _CHANNEL_CODES[ds.channel_mode], snr, ds.seed))
    rec = np.zeros(len(ds), dtype=[("label", "u1"), ("x", "<f4", (ds.feature_len,))])
    rec["label"] = ds.labels
    rec["x"] = ds.features
    buf.write(rec.tobytes())
    return buf.getvalue()


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))
    return path


def _take(raw, pos, n):
    if pos + n > len(raw):
        raise FormatError("dataset file is truncated")
    return raw[pos:pos + n], pos + n


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    head, pos = _take(raw, 0, 4)
    if head != DATASET_MAGIC:
        raise FormatError(f"bad magic {head!r}")
    chunk, pos = _take(raw, pos, 9)
    version, feature_len, n, n_classes = struct.unpack("<HHIB", chunk)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    names = []
    for _ in range(n_classes):
        chunk, pos = _take(raw, pos, 1)
        chunk, pos = _take(raw, pos, chunk[0])
        try:
            names.append(chunk.decode())
        except UnicodeDecodeError as exc:
            raise FormatError("label map is not valid UTF-8") from exc
    chunk, pos = _take(raw, pos, 14)
    bm, cm, snr, seed = struct.unpack("<BBfQ", chunk)
    if bm >= len(BURST_MODES) or cm >= len(CHANNEL_MODES):
        raise FormatError("invalid burst/channel mode code")
    rec_size = 1 + 4 * feature_len
    if len(raw) - pos != n * rec_size:
        raise FormatError(
            f"header declares {n} records but payload holds {(len(raw) - pos) / rec_size:g}")
    rec = np.frombuffer(raw, dtype=[("label", "u1"), ("x", "<f4", (feature_len,))],
                        count=n, offset=pos)
    if n and rec["label"].max() >= n_classes:
        raise FormatError("record label outside label map")
    return BurstDataset(
        rec["x"].astype(np.float32), rec["label"].copy(), tuple(names), BURST_MODES[bm],
        CHANNEL_MODES[cm], None if math.isnan(snr) else float(snr), int(seed),
    )
