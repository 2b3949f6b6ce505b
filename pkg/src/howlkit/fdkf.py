"""Per-bin frequency-domain Kalman filter for feedback-path tracking.

The feedback path is modelled per STFT bin as a length-L filter across the
most recent reference frames, so the near-end estimate for bin b is

    S_hat[b] = Y[b] - sum_l X_hist[b, l] * W[b, l]

W tracks the path, P is its error covariance kept diagonal (one nonnegative
value per bin and tap), and X_hist holds the last L reference frames, newest
first.  Observation and process covariances (psi_vv, psi_dd) are supplied
fresh every frame — from the closed-form source below, or from learned
estimators.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FdkfConfig:
    """Filter sizes and recursion constants.

    A is the state transition factor, alpha scales the gain term inside the
    covariance update, beta the smoothing of the classical observation
    covariance.  eps regularizes the gain denominator on silent frames.
    """

    num_bins: int = 65
    num_taps: int = 20
    A: float = 0.999
    alpha: float = 0.5
    p_init: float = 1e-2
    eps: float = 1e-10
    beta: float = 0.9

    def __post_init__(self):
        if self.num_bins < 1 or self.num_taps < 1:
            raise ValueError("num_bins and num_taps must be at least 1")
        if not 0.0 < self.A <= 1.0:
            raise ValueError("A must be in (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        if self.p_init <= 0:
            raise ValueError("p_init must be positive")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")


@dataclass(frozen=True)
class CovariancePair:
    """Per-frame noise covariances: psi_vv per bin, psi_dd per bin and tap."""

    psi_vv: np.ndarray
    psi_dd: np.ndarray

    def __post_init__(self):
        for name, arr in (("psi_vv", self.psi_vv), ("psi_dd", self.psi_dd)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")


class KalmanFilter:
    """Stateful per-bin Kalman recursion; one instance per audio stream.

    Call order per frame: push_reference(X_k), predict(Y_k), gain(cov),
    update(K, S_hat, cov).
    """

    def __init__(self, cfg: FdkfConfig):
        self.cfg = cfg
        self.W = np.zeros((cfg.num_bins, cfg.num_taps), dtype=np.complex128)
        self.P = np.full((cfg.num_bins, cfg.num_taps), cfg.p_init, dtype=np.float64)
        self.X_hist = np.zeros((cfg.num_bins, cfg.num_taps), dtype=np.complex128)
        self.clamp_count = 0  # covariance floor hits, for diagnostics

    def _check_frame(self, frame, name):
        frame = np.asarray(frame)
        if frame.shape != (self.cfg.num_bins,):
            raise ValueError(f"{name} must have shape ({self.cfg.num_bins},), got {frame.shape}")
        return frame

    def push_reference(self, x_new):
        """Shift the reference history and place the new frame at slot 0."""
        x_new = self._check_frame(x_new, "reference frame")
        self.X_hist = np.roll(self.X_hist, 1, axis=1)
        self.X_hist[:, 0] = x_new

    def predict(self, y):
        """Near-end estimate: microphone frame minus the modelled feedback."""
        y = self._check_frame(y, "microphone frame")
        return y - np.sum(self.X_hist * self.W, axis=1)

    def gain(self, cov: CovariancePair) -> np.ndarray:
        """Kalman gain per bin and tap."""
        x = self.X_hist
        x_pow = x.real**2 + x.imag**2
        denom = np.sum(x_pow * self.P, axis=1) + cov.psi_vv + self.cfg.eps
        return (self.P * np.conj(x)) / denom[:, None]

    def update(self, K, s_hat, cov: CovariancePair):
        """Advance W and P one frame; P is floored at zero (counted)."""
        A = self.cfg.A
        self.W = A * (self.W + K * s_hat[:, None])
        decay = 1.0 - self.cfg.alpha * (K * self.X_hist).real
        P = (A * A) * decay * self.P + cov.psi_dd
        neg = P < 0
        if np.any(neg):
            self.clamp_count += int(np.count_nonzero(neg))
            P[neg] = 0.0
        self.P = P


class ClassicalCovariances:
    """Closed-form covariance source.

    psi_vv is an exponentially smoothed near-end power estimate and psi_dd
    ties process noise to the tap magnitudes, so the covariances need no
    learned model.  Stateful: one instance per stream.
    """

    def __init__(self, cfg: FdkfConfig):
        self.cfg = cfg
        self.smoothed_vv = np.zeros(cfg.num_bins)

    def __call__(self, s_hat, filt: KalmanFilter) -> CovariancePair:
        b = self.cfg.beta
        power = np.abs(s_hat) ** 2
        self.smoothed_vv = b * self.smoothed_vv + (1.0 - b) * power
        psi_dd = (1.0 - self.cfg.A**2) * (filt.W.real**2 + filt.W.imag**2)
        return CovariancePair(self.smoothed_vv.copy(), psi_dd)

    def reset(self):
        self.smoothed_vv[:] = 0.0


_SNAPSHOT_VERSION = 1


def save_state(filt: KalmanFilter, path: str):
    """Write filter state and config to a binary snapshot."""
    cfg = filt.cfg
    with open(path, "wb") as f:
        np.savez(
            f,
            version=np.array(_SNAPSHOT_VERSION),
            W=filt.W,
            P=filt.P,
            X_hist=filt.X_hist,
            clamp_count=np.array(filt.clamp_count),
            num_bins=np.array(cfg.num_bins),
            num_taps=np.array(cfg.num_taps),
            A=np.array(cfg.A),
            alpha=np.array(cfg.alpha),
            p_init=np.array(cfg.p_init),
            eps=np.array(cfg.eps),
            beta=np.array(cfg.beta),
        )


def load_state(path: str) -> KalmanFilter:
    """Rebuild a filter from a snapshot written by save_state."""
    with np.load(path) as data:
        version = int(data["version"])
        if version != _SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        cfg = FdkfConfig(
            num_bins=int(data["num_bins"]),
            num_taps=int(data["num_taps"]),
            A=float(data["A"]),
            alpha=float(data["alpha"]),
            p_init=float(data["p_init"]),
            eps=float(data["eps"]),
            beta=float(data["beta"]),
        )
        filt = KalmanFilter(cfg)
        filt.W = data["W"].copy()
        filt.P = data["P"].copy()
        filt.X_hist = data["X_hist"].copy()
        filt.clamp_count = int(data["clamp_count"])
    return filt
