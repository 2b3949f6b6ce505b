"""Mono WAV reading and writing: 16-bit PCM and 32-bit float.

No resampling is ever performed; callers that need a specific rate must
check and refuse mismatches explicitly.
"""

import numpy as np
from scipy.io import wavfile

from .signals import TimeSignal


def write_wav(path, samples, sample_rate: int, fmt: str = "float32"):
    """Write mono samples. fmt is 'float32' or 'pcm16'."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("only mono WAV output is supported")
    if fmt == "float32":
        wavfile.write(str(path), int(sample_rate), samples.astype(np.float32))
    elif fmt == "pcm16":
        clipped = np.clip(samples, -1.0, 32767.0 / 32768.0)
        wavfile.write(str(path), int(sample_rate), np.round(clipped * 32768.0).astype(np.int16))
    else:
        raise ValueError(f"unknown WAV format {fmt!r} (use 'float32' or 'pcm16')")


def read_wav(path, expect_rate: int = None) -> TimeSignal:
    """Read a mono WAV file; PCM16 is scaled to [-1, 1), float is passed through.

    ``expect_rate`` makes a sample-rate mismatch a hard error — resampling is
    never performed.
    """
    rate, data = wavfile.read(str(path))
    if expect_rate is not None and int(rate) != int(expect_rate):
        raise ValueError(
            f"{path}: sample rate is {rate} Hz but {expect_rate} Hz is required; "
            "resampling is not performed")
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono WAV input is supported, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    return TimeSignal(samples, int(rate))
