"""Accuracy, confusion matrices, SNR sweeps and CSV/SVG report output."""

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .dataset import BurstDataset, deinterleave, interleave
from .errors import ParameterError
from .impairments import add_awgn
from .seeding import derive_seed

CLASS_CODES = ("0-BT", "1-WiFi", "2-NRF", "3-ZBee")
BT, NRF = 0, 2


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    labels: tuple = CLASS_CODES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ParameterError("confusion counts must be square")
        if np.any(self.counts < 0):
            raise ParameterError("confusion counts must be nonnegative")

    @classmethod
    def from_predictions(cls, truth, pred, n_classes=4, labels=CLASS_CODES):
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
        return cls(counts, tuple(labels))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def row_sums(self):
        return self.counts.sum(axis=1)

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def pair_mass(self, a, b):
        """Symmetric off-diagonal mass between classes a and b, as a fraction of all records."""
        return float(self.counts[a, b] + self.counts[b, a]) / max(self.total, 1)

    def pair_masses(self):
        n = self.counts.shape[0]
        return {(a, b): self.pair_mass(a, b) for a, b in combinations(range(n), 2)}


def evaluate(model, dataset):
    """Argmax accuracy and confusion matrix (rows true, columns predicted)."""
    if dataset.feature_len != model.layers[0].in_dim:
        raise ParameterError(
            f"dataset feature length {dataset.feature_len} != model input {model.layers[0].in_dim}")
    pred = model.predict(dataset.features)
    n = model.layers[-1].out_dim
    cm = ConfusionMatrix.from_predictions(dataset.labels, pred, n,
                                          CLASS_CODES if n == 4 else tuple(map(str, range(n))))
    return cm.accuracy, cm


@dataclass
class SnrSweepReport:
    snr_grid_db: list
    accuracy: list
    confusions: list
    model_id: str
    dataset_id: str
    burst_mode: str = ""
    channel_mode: str = ""
    n_records: int = 0
    burst_ids: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not len(self.snr_grid_db) == len(self.accuracy) == len(self.confusions):
            raise ParameterError("sweep sequences must have equal lengths")

    def bt_nrf_diagnostic(self):
        """Per SNR: BT<->NRF mass, the largest other pair mass, and whether BT<->NRF dominates."""
        rows = []
        for snr, cm in zip(self.snr_grid_db, self.confusions):
            masses = cm.pair_masses()
            bt_nrf = masses.pop((BT, NRF))
            other = max(masses.values()) if masses else 0.0
            rows.append((snr, bt_nrf, other, bt_nrf > other))
        return rows


def add_eval_noise(clean, snr_db, seed):
    """Noisy copy of a clean burst pool at ``snr_db``, renormalized and interleaved.

    Every SNR level reuses the same standard-normal draws (scaled to the
    target), so sweeps are paired both in bursts and in noise shape.
    """
    rng = np.random.default_rng(derive_seed(seed, "eval-noise"))
    bursts = deinterleave(clean.features.astype(np.float64))
    out = np.empty_like(clean.features)
    for i, b in enumerate(bursts):
        noisy = add_awgn(b, snr_db, rng)
        noisy /= math.sqrt(np.mean(np.abs(noisy) ** 2))
        out[i] = interleave(noisy)
    return BurstDataset(out, clean.labels, clean.label_map, clean.burst_mode,
                        clean.channel_mode, snr_db, clean.seed, clean.source_ids, clean.offsets)


def snr_sweep(model, clean, snr_grid, policy_base=None, seed=0, model_id="model",
              dataset_id="pool"):
    """Evaluate ``model`` on the clean pool re-impaired at each SNR in ``snr_grid``.

    The pool's bursts already carry the non-noise impairments; only the
    noise stage is applied here. ``policy_base`` supplies the channel mode
    recorded in the report when the pool does not.
    """
    grid = [float(s) for s in snr_grid]
    if not grid:
        raise ParameterError("SNR grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError("SNR grid must be strictly ascending")
    accs, cms = [], []
    for snr in grid:
        acc, cm = evaluate(model, add_eval_noise(clean, snr, seed))
        accs.append(acc)
        cms.append(cm)
    ids = clean.source_ids or tuple(range(len(clean)))
    channel_mode = clean.channel_mode or (policy_base.channel_mode if policy_base else "")
    return SnrSweepReport(grid, accs, cms, model_id, dataset_id, clean.burst_mode,
                          channel_mode, len(clean), tuple(ids))


def _fmt(x):
    return repr(float(x))


def log_training_curve(records, path):
    """One CSV row per epoch: train and validation accuracy plus tracked datasets."""
    epochs = [r.epoch for r in records]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ParameterError("epochs must be ascending")
    tracked = list(records[0].tracked) if records else []
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_acc", "valid_acc", "loss"] + [f"acc_{k}" for k in tracked])
        for r in records:
            w.writerow([r.epoch, _fmt(r.train_acc), _fmt(r.valid_acc), _fmt(r.loss)]
                       + [_fmt(r.tracked[k]) for k in tracked])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_confusion_csv(cm, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(cm.labels))
        for label, row in zip(cm.labels, cm.counts):
            w.writerow([label] + [int(v) for v in row])
    return path


def _slug(text):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in str(text))


def _snr_tag(snr):
    return f"{snr:g}".replace("-", "m")


_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#000000")


def accuracy_svg(sweeps, width=560, height=360):
    """Line chart of accuracy vs SNR, one polyline per sweep."""
    ml, mr, mt, mb = 60, 150, 20, 50
    pw, ph = width - ml - mr, height - mt - mb
    all_snr = [s for sw in sweeps for s in sw.snr_grid_db]
    lo, hi = min(all_snr), max(all_snr)
    span = (hi - lo) or 1.0

    def xy(snr, acc):
        return ml + (snr - lo) / span * pw, mt + (1 - acc) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for k in range(6):
        acc = k / 5
        _, y = xy(lo, acc)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{ml - 6}" y="{y + 4:.1f}" text-anchor="end">{acc:.1f}</text>')
    for snr in sorted(set(all_snr)):
        x, _ = xy(snr, 0)
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle">{snr:g}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">SNR (dB)</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">accuracy</text>')
    for i, sw in enumerate(sweeps):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in
                       (xy(s, a) for s, a in zip(sw.snr_grid_db, sw.accuracy)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for s, a in zip(sw.snr_grid_db, sw.accuracy):
            x, y = xy(s, a)
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>')
        ly = mt + 14 + 16 * i
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 34}" y="{ly}">{escape(sw.model_id)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def confusion_svg(sweep, cell=22):
    """Row-normalized heatmaps, one 4x4 grid per SNR, side by side."""
    n = sweep.confusions[0].counts.shape[0] if sweep.confusions else 4
    grid_w = n * cell
    gap = 30
    width = 50 + len(sweep.confusions) * (grid_w + gap)
    height = grid_w + 70
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
             f'<text x="10" y="14">{escape(sweep.model_id)}</text>']
    short = [c.split("-", 1)[-1][0] for c in (sweep.confusions[0].labels if sweep.confusions
                                               else CLASS_CODES)]
    for g, (snr, cm) in enumerate(zip(sweep.snr_grid_db, sweep.confusions)):
        x0, y0 = 40 + g * (grid_w + gap), 40
        rows = cm.counts / np.maximum(cm.row_sums[:, None], 1)
        parts.append(f'<text x="{x0 + grid_w / 2}" y="{y0 - 6}" text-anchor="middle">'
                     f'{snr:g} dB</text>')
        for r in range(n):
            for c in range(n):
                shade = int(255 * (1 - rows[r, c]))
                parts.append(f'<rect x="{x0 + c * cell}" y="{y0 + r * cell}" width="{cell}" '
                             f'height="{cell}" fill="rgb({shade},{shade},255)" stroke="#fff"/>')
        for k in range(n):
            parts.append(f'<text x="{x0 + k * cell + cell / 2}" y="{y0 + grid_w + 12}" '
                         f'text-anchor="middle">{escape(short[k])}</text>')
            if g == 0:
                parts.append(f'<text x="{x0 - 4}" y="{y0 + k * cell + cell / 2 + 3}" '
                             f'text-anchor="end">{escape(short[k])}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(sweeps, out_dir):
    """Write the comparative CSV/SVG report for a set of sweeps; returns written paths."""
    if not sweeps:
        raise ParameterError("no sweeps to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    acc_path = out / "accuracy_vs_snr.csv"
    with acc_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "burst_mode", "channel_mode", "snr_db", "accuracy", "n_records"])
        for sw in sweeps:
            for snr, acc in zip(sw.snr_grid_db, sw.accuracy):
                w.writerow([sw.model_id, sw.burst_mode, sw.channel_mode, f"{snr:g}",
                            _fmt(acc), sw.n_records])
    written.append(acc_path)

    diag_path = out / "confusion_diagnostics.csv"
    with diag_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "snr_db", "bt_nrf_mass", "max_other_pair_mass", "bt_nrf_dominant"])
        for sw in sweeps:
            for snr, bt_nrf, other, dom in sw.bt_nrf_diagnostic():
                w.writerow([sw.model_id, f"{snr:g}", _fmt(bt_nrf), _fmt(other), int(dom)])
    written.append(diag_path)

    for sw in sweeps:
        for snr, cm in zip(sw.snr_grid_db, sw.confusions):
            p = out / f"confusion_{_slug(sw.model_id)}_{_snr_tag(snr)}dB.csv"
            written.append(write_confusion_csv(cm, p))
        p = out / f"confusion_{_slug(sw.model_id)}.svg"
        p.write_text(confusion_svg(sw))
        written.append(p)

    svg = out / "accuracy_vs_snr.svg"
    svg.write_text(accuracy_svg(sweeps))
    written.append(svg)
    return written
