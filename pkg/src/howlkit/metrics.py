"""Objective evaluation: SDR, log-spectral distance, and sweep reports.

SDR here is the plain energy ratio between the target and the residual —
no permutation search or projection, since every scene has exactly one
source.  It is deliberately sensitive to scale: an estimate at half the
target amplitude scores ~6 dB even though it "sounds" clean.  LSD stands in
for perceptual scores; it compares log-magnitude spectra frame by frame.
"""

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .loop import HowlDetectorConfig, LoopScene, run_scene
from .signals import StftConfig, TimeSignal, stft

SDR_CAP_DB = 60.0
SDR_FLOOR_DB = -99.0


def _as_samples(sig) -> np.ndarray:
    if isinstance(sig, TimeSignal):
        return sig.samples
    return np.asarray(sig, dtype=np.float64)


def sdr(reference, estimate) -> float:
    """10*log10(sum s^2 / sum (s - s_hat)^2), in dB.

    Capped at +60 dB (residual numerically zero) and floored at -99 dB when
    the reference itself is silent.  Inputs may be TimeSignals or arrays of
    equal length.
    """
    s = _as_samples(reference)
    s_hat = _as_samples(estimate)
    if isinstance(reference, TimeSignal) and isinstance(estimate, TimeSignal):
        if reference.sample_rate != estimate.sample_rate:
            raise ValueError("sample rates differ")
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    num = float(np.sum(s * s))
    if num == 0.0:
        return SDR_FLOOR_DB
    den = float(np.sum((s - s_hat) ** 2))
    if den == 0.0:
        return SDR_CAP_DB
    return min(10.0 * np.log10(num / den), SDR_CAP_DB)


def lsd(reference, estimate, cfg: StftConfig = None) -> float:
    """Log-spectral distance in dB: mean over frames of the RMS over bins
    of the difference between 20*log10(|S| + delta) spectra, delta = 1e-8."""
    if cfg is None:
        cfg = StftConfig()
    s = _as_samples(reference)
    s_hat = _as_samples(estimate)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    delta = 1e-8
    ref_db = 20.0 * np.log10(np.abs(stft(TimeSignal(s, cfg.sample_rate), cfg)) + delta)
    est_db = 20.0 * np.log10(np.abs(stft(TimeSignal(s_hat, cfg.sample_rate), cfg)) + delta)
    return float(np.mean(np.sqrt(np.mean((ref_db - est_db) ** 2, axis=1))))


def spectrogram_pgm(signal, path: str, cfg: StftConfig = None, db_range=(-80.0, 0.0)):
    """Write a log-magnitude spectrogram as a binary portable graymap.

    Rows run from the highest bin at the top to DC at the bottom; columns are
    frames.  Magnitudes are normalized to the signal's own peak, mapped over
    ``db_range`` (default [-80, 0] dB) and quantized to 8 bits.
    """
    if cfg is None:
        cfg = StftConfig()
    sig = signal if isinstance(signal, TimeSignal) else TimeSignal(_as_samples(signal), cfg.sample_rate)
    mags = np.abs(stft(sig, cfg))
    peak = np.max(mags)
    if peak == 0.0:
        peak = 1.0
    db = 20.0 * np.log10(np.maximum(mags / peak, 1e-12))
    lo, hi = float(db_range[0]), float(db_range[1])
    if not lo < hi:
        raise ValueError("db_range must be (low, high) with low < high")
    level = np.clip((db - lo) / (hi - lo), 0.0, 1.0)
    img = np.round(255.0 * level).astype(np.uint8).T[::-1]  # bins x frames, DC last
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(img.tobytes())
    return path


@dataclass(frozen=True)
class EvalRow:
    """Outcome of one (variant, gain, scene) run."""

    variant: str
    gain: float
    scene_id: int
    sdr: float
    lsd: float
    howled: bool


@dataclass(frozen=True)
class EvalReport:
    """Per-scene rows plus aggregates recomputable from them."""

    rows: tuple

    def aggregates(self):
        """dict keyed by (variant, gain): mean/std of SDR and LSD, howl rate."""
        groups = {}
        for row in self.rows:
            groups.setdefault((row.variant, row.gain), []).append(row)
        out = {}
        for key in sorted(groups, key=lambda kv: (kv[0], kv[1])):
            rows = groups[key]
            sdrs = np.array([r.sdr for r in rows])
            lsds = np.array([r.lsd for r in rows])
            out[key] = {
                "count": len(rows),
                "sdr_mean": float(np.mean(sdrs)),
                "sdr_std": float(np.std(sdrs)),
                "lsd_mean": float(np.mean(lsds)),
                "lsd_std": float(np.std(lsds)),
                "howl_rate": float(np.mean([r.howled for r in rows])),
            }
        return out

    def to_csv(self, path: str = None) -> str:
        """Write per-scene rows as CSV; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["variant", "gain", "scene", "sdr_db", "lsd_db", "howled"])
        for r in self.rows:
            writer.writerow([r.variant, f"{r.gain:g}", r.scene_id,
                             f"{r.sdr:.4f}", f"{r.lsd:.4f}", int(r.howled)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text

    def summary(self) -> str:
        """Mean +/- std table, one line per (variant, gain)."""
        lines = ["variant        gain   n   SDR mean+/-std (dB)   LSD mean (dB)  howl%"]
        for (variant, gain), agg in self.aggregates().items():
            lines.append(
                "%-14s %4g  %2d   %8.2f +/- %-6.2f   %10.2f      %4.0f"
                % (variant, gain, agg["count"], agg["sdr_mean"], agg["sdr_std"],
                   agg["lsd_mean"], 100.0 * agg["howl_rate"])
            )
        return "\n".join(lines)


def _eval_one(scene_id, scene, variant_name, factory, det, stft_cfg):
    res = run_scene(scene, factory(scene), det=det)
    return EvalRow(
        variant=variant_name,
        gain=scene.gain,
        scene_id=scene_id,
        sdr=sdr(res.s, res.s_hat_aligned()),
        lsd=lsd(res.s, res.s_hat_aligned(), stft_cfg),
        howled=res.howl_event is not None,
    )


def evaluate(scenes, variants, gains=(1.5, 2.0, 2.5, 3.0), det: HowlDetectorConfig = None,
             stft_cfg: StftConfig = None, threads: int = None) -> EvalReport:
    """Run every AHS variant over every scene at every gain.

    ``variants`` maps name -> factory(scene) -> suppressor callback; a fresh
    suppressor is built per run so filter state never leaks between scenes.
    ``scenes`` are templates whose gain field is overridden by each sweep
    point.  Ordering of rows is deterministic regardless of thread count
    (``threads`` defaults to the HOWLKIT_THREADS env var, serial otherwise).
    """
    if threads is None:
        threads = int(os.environ.get("HOWLKIT_THREADS", "1"))
    if stft_cfg is None:
        stft_cfg = StftConfig()
    jobs = []
    for name in sorted(variants):
        for gain in gains:
            for sid, scene in enumerate(scenes):
                swept = replace(scene, gain=float(gain)) if scene.gain != gain else scene
                jobs.append((sid, swept, name, variants[name], det, stft_cfg))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda args: _eval_one(*args), jobs))
    else:
        rows = [_eval_one(*job) for job in jobs]
    return EvalReport(rows=tuple(rows))
