"""Streaming howling suppressor: a Kalman core with optional learned parts.

One processor class covers every variant.  Bare, it is the classical
frequency-domain Kalman suppressor.  Attaching a mask network refines the
filter reference out of the microphone spectrum; attaching the covariance
network pair replaces the closed-form noise statistics.  Every variant runs
the same code path, so disabling the networks reproduces the classical
suppressor bit for bit.

The processor rebuilds its own loudspeaker reference: playback is the
processor's past output, amplified, delayed and clipped exactly the way the
loop does it, so no second capture channel is needed.  Between
begin_window() and end_window() every per-frame intermediate is recorded,
and the window loss is backpropagated through the mask application, the
covariance injection and (unless stop_grad_filter is set) the Kalman
recursion itself, producing exact gradients for all attached networks.
"""

import numpy as np

from .fdkf import ClassicalCovariances, CovariancePair, FdkfConfig, KalmanFilter
from .loop import DelayLine
from .nets import mask_apply, normalize_log_power
from .signals import StftConfig, StreamingIstft, StreamingStft, log_power

MASK_SCOPES = ("everywhere", "predict_only")


class KalmanAhs:
    """Frame-synchronous suppressor usable directly as a loop callback.

    Call it with one hop of microphone samples, get one hop of output;
    ``latency`` declares the fixed analysis/synthesis delay.  ``gain``,
    ``delay_samples`` and ``sat`` must match the loop the processor runs in —
    they drive the internal loudspeaker mirror.

    ``mask_scope`` decides where a learned reference acts: "everywhere"
    (default) feeds it to prediction, gain and update alike; "predict_only"
    keeps the raw loudspeaker reference for gain and update.
    """

    def __init__(self, gain, delay_samples, sat=1.0, stft_cfg=None, fdkf_cfg=None,
                 mask_net=None, vv_net=None, dd_net=None,
                 mask_scope="everywhere", stop_grad_filter=False):
        stft_cfg = stft_cfg if stft_cfg is not None else StftConfig()
        fdkf_cfg = fdkf_cfg if fdkf_cfg is not None else FdkfConfig(num_bins=stft_cfg.num_bins)
        if fdkf_cfg.num_bins != stft_cfg.num_bins:
            raise ValueError(
                f"filter expects {fdkf_cfg.num_bins} bins but the transform produces "
                f"{stft_cfg.num_bins}"
            )
        if gain < 0:
            raise ValueError("gain must be nonnegative")
        if delay_samples < stft_cfg.hop:
            raise ValueError("loop delay must be at least one hop for the reference mirror")
        if (vv_net is None) != (dd_net is None):
            raise ValueError("covariance networks come as a pair: both or neither")
        if mask_scope not in MASK_SCOPES:
            raise ValueError(f"mask_scope must be one of {MASK_SCOPES}")

        self.cfg = stft_cfg
        self.fcfg = fdkf_cfg
        self.gain = float(gain)
        self.delay_samples = int(delay_samples)
        self.sat = float(sat)
        self.mask_net = mask_net
        self.vv_net = vv_net
        self.dd_net = dd_net
        self.mask_scope = mask_scope
        self.stop_grad_filter = bool(stop_grad_filter)
        self.latency = stft_cfg.frame_len - stft_cfg.hop

        self.filt = KalmanFilter(fdkf_cfg)
        self._stft_y = StreamingStft(stft_cfg)
        self._stft_x = StreamingStft(stft_cfg)
        self._istft = StreamingIstft(stft_cfg)
        self._mirror = DelayLine(self.delay_samples)
        self._x_prev = np.zeros(stft_cfg.num_bins, dtype=np.complex128)
        # separate reference history only when the learned reference is kept
        # out of the gain/update equations
        self._ref_hist = None
        if mask_scope == "predict_only":
            self._ref_hist = np.zeros((fdkf_cfg.num_bins, fdkf_cfg.num_taps),
                                      dtype=np.complex128)
        self._mask_state = mask_net.init_state() if mask_net is not None else None
        self._vv_state = vv_net.init_state() if vv_net is not None else None
        self._dd_state = dd_net.init_state() if dd_net is not None else None
        self._classical = ClassicalCovariances(fdkf_cfg) if vv_net is None else None
        self._tape = None
        self.frames_seen = 0

    @classmethod
    def for_scene(cls, scene, **kwargs):
        """Build a processor matched to a loop scene's gain/delay/clip."""
        return cls(scene.gain, scene.delay_samples, sat=scene.sat, **kwargs)

    # ----------------------------------------------------------- processing

    def __call__(self, chunk):
        """One hop in, one hop out, mirroring the loudspeaker internally."""
        x_chunk = self._mirror.peek(self.cfg.hop)
        out = self.step_open(chunk, x_chunk)
        self._mirror.push(np.clip(self.gain * out, -self.sat, self.sat))
        return out

    def step_open(self, y_chunk, x_chunk):
        """Process one hop with an externally supplied loudspeaker chunk.

        Verification hook: lets a test drive the processor open-loop with
        frozen inputs.  Normal use is __call__, which reconstructs the
        loudspeaker chunk from the processor's own output history.
        """
        y_frame = self._stft_y.push(np.asarray(y_chunk, dtype=np.float64))
        x_frame = self._stft_x.push(np.asarray(x_chunk, dtype=np.float64))
        s_hat = self._process_frame(y_frame, x_frame)
        return self._istft.push(s_hat)

    def _process_frame(self, y_frame, x_raw):
        filt = self.filt
        mcache = None
        if self.mask_net is not None:
            feat = np.concatenate([
                normalize_log_power(log_power(y_frame)),
                normalize_log_power(log_power(self._x_prev)),
            ])
            m, self._mask_state, mcache = self.mask_net.step(feat, self._mask_state)
            ref = mask_apply(m, y_frame)
        else:
            ref = x_raw

        filt.push_reference(ref if self._ref_hist is None else x_raw)
        if self._ref_hist is not None:
            self._ref_hist = np.roll(self._ref_hist, 1, axis=1)
            self._ref_hist[:, 0] = ref
            hist_pred = self._ref_hist
            s_hat = y_frame - np.sum(hist_pred * filt.W, axis=1)
        else:
            hist_pred = filt.X_hist
            s_hat = filt.predict(y_frame)

        W_pre, P_pre = filt.W, filt.P
        vcache = dcache = rss = None
        if self.vv_net is not None:
            vv, self._vv_state, vcache = self.vv_net.step(np.abs(s_hat), self._vv_state)
            rss = np.sqrt(np.sum(W_pre.real**2 + W_pre.imag**2, axis=1))
            dd_out, self._dd_state, dcache = self.dd_net.step(rss, self._dd_state)
            taps = self.fcfg.num_taps
            cov = CovariancePair(vv, np.repeat((dd_out / taps)[:, None], taps, axis=1))
        else:
            cov = self._classical(s_hat, filt)

        K = filt.gain(cov)
        filt.update(K, s_hat, cov)

        if self._tape is not None:
            # every stored array is a fresh object the forward pass never
            # mutates afterwards, so references suffice
            self._tape.append({
                "y": y_frame, "mcache": mcache,
                "hist_pred": hist_pred, "hist_gain": filt.X_hist,
                "W": W_pre, "P": P_pre, "s_hat": s_hat, "K": K,
                "vv": cov.psi_vv, "vcache": vcache, "dcache": dcache, "rss": rss,
                "pos": filt.P > 0,
            })
        self._x_prev = x_raw
        self.frames_seen += 1
        return s_hat

    # ------------------------------------------------------------- training

    def begin_window(self):
        if self._tape is not None:
            raise RuntimeError("a window is already recording")
        self._tape = []

    def abort_window(self):
        """Drop the recorded window without computing anything."""
        self._tape = None

    @property
    def window_frames(self):
        return 0 if self._tape is None else len(self._tape)

    def end_window(self, target_mags, want_grads=True):
        """Close the recorded window against target magnitudes.

        target_mags has one row of per-bin magnitudes per recorded frame.
        Returns (mean absolute magnitude error, {net name: gradient dict})
        with entries only for the networks actually attached; the tape is
        released either way.
        """
        if self._tape is None:
            raise RuntimeError("no window is recording")
        tape, self._tape = self._tape, None
        if not tape:
            raise ValueError("window is empty")
        targets = np.asarray(target_mags, dtype=np.float64)
        bins = self.fcfg.num_bins
        if targets.shape != (len(tape), bins):
            raise ValueError(
                f"targets must have shape ({len(tape)}, {bins}), got {targets.shape}")
        s_mags = np.abs(np.array([e["s_hat"] for e in tape]))
        diff = s_mags - targets
        loss = float(np.mean(np.abs(diff)))
        if not want_grads:
            return loss, {}
        return loss, self._backward(tape, s_mags, np.sign(diff) / diff.size)

    def _backward(self, tape, s_mags, gmag):
        """Reverse the window.

        Complex adjoint convention: for z = a + ib the carried gradient is
        dL/da + i dL/db.  Then z = u*v gives gu += gz*conj(v); r = |z|^2
        gives gz += 2*gr*z; and a real factor p in z = p*w gives
        gp += Re(gz*conj(w)).
        """
        fcfg = self.fcfg
        A, A2, alpha = fcfg.A, fcfg.A**2, fcfg.alpha
        taps, eps, beta = fcfg.num_taps, fcfg.eps, fcfg.beta
        everywhere = self._ref_hist is None

        grads = {}
        if self.mask_net is not None:
            grads["mask"] = self.mask_net.zero_grads()
            mask_sadj = self.mask_net.init_state()
        if self.vv_net is not None:
            grads["vv"] = self.vv_net.zero_grads()
            grads["dd"] = self.dd_net.zero_grads()
            vv_sadj = self.vv_net.init_state()
            dd_sadj = self.dd_net.init_state()

        shape = (fcfg.num_bins, taps)
        gW = np.zeros(shape, dtype=np.complex128)   # dL/dW(k+1)
        gP = np.zeros(shape)                         # dL/dP(k+1)
        gH = np.zeros(shape, dtype=np.complex128)   # dL/d reference history
        gvv_carry = np.zeros(fcfg.num_bins)          # classical smoother state

        for k in reversed(range(len(tape))):
            e = tape[k]
            if self.stop_grad_filter:
                gW[:] = 0.0
                gP[:] = 0.0
            X, Hp = e["hist_gain"], e["hist_pred"]
            W, P, K, s_hat, vv = e["W"], e["P"], e["K"], e["s_hat"], e["vv"]
            s_mag = s_mags[k]
            unit = np.where(s_mag > 0, 1.0 / np.maximum(s_mag, 1e-300), 0.0) * s_hat
            gS = gmag[k] * unit

            # covariance update P(k+1) = max(A^2 (1 - a Re(KX)) P + dd, 0)
            gPraw = gP * e["pos"]
            gdd = gPraw
            decay = 1.0 - alpha * (K * X).real
            g_decay = A2 * gPraw * P
            gP_new = A2 * gPraw * decay
            gK = (-alpha * g_decay) * np.conj(X)
            gH_frame = np.zeros(shape, dtype=np.complex128)
            if everywhere:
                gH_frame += (-alpha * g_decay) * np.conj(K)

            # weight update W(k+1) = A (W + K s_hat)
            gW_new = A * gW
            gK += A * gW * np.conj(s_hat)[:, None]
            gS = gS + A * np.sum(gW * np.conj(K), axis=1)

            # gain K = P conj(X) / (sum |X|^2 P + vv + eps)
            xpow = X.real**2 + X.imag**2
            denom = np.sum(xpow * P, axis=1) + vv + eps
            t1 = P * np.conj(X)
            g_t1 = gK / denom[:, None]
            gdenom = -np.sum((gK * np.conj(t1)).real, axis=1) / (denom * denom)
            gP_new += (g_t1 * X).real
            gP_new += gdenom[:, None] * xpow
            if everywhere:
                gH_frame += P * np.conj(g_t1)
                gH_frame += 2.0 * gdenom[:, None] * (P * X)
            gvv = gdenom

            # covariance source
            if self.vv_net is not None:
                dmag, vv_sadj = self.vv_net.step_back(e["vcache"], gvv, vv_sadj, grads["vv"])
                gS = gS + dmag * unit
                g_ddout = np.sum(gdd, axis=1) / taps
                drss, dd_sadj = self.dd_net.step_back(e["dcache"], g_ddout, dd_sadj, grads["dd"])
                rss = e["rss"]
                gW_new += (np.where(rss > 0, drss / np.maximum(rss, 1e-300), 0.0))[:, None] * W
            else:
                g_sm = gvv + gvv_carry  # vv(k) = b vv(k-1) + (1-b) |s_hat|^2
                gS = gS + (2.0 * (1.0 - beta)) * g_sm * s_hat
                gvv_carry = beta * g_sm
                gW_new += (2.0 * (1.0 - A2)) * gdd * W

            # prediction s_hat = Y - sum_l Hp W
            gW_new += -np.conj(Hp) * gS[:, None]
            gH_frame += -np.conj(W) * gS[:, None]

            # history shift: slot 0 holds this frame's reference
            gH_tot = gH_frame + gH
            gref = gH_tot[:, 0]
            gH = np.zeros(shape, dtype=np.complex128)
            gH[:, :-1] = gH_tot[:, 1:]

            if self.mask_net is not None:
                gm = (gref * np.conj(e["y"])).real
                _, mask_sadj = self.mask_net.step_back(e["mcache"], gm, mask_sadj, grads["mask"])

            gW, gP = gW_new, gP_new
        return grads

    # ----------------------------------------------------- state management

    def snapshot(self):
        """Deep copy of all stream state (weights excluded: nets are shared)."""
        return {
            "W": self.filt.W.copy(),
            "P": self.filt.P.copy(),
            "X_hist": self.filt.X_hist.copy(),
            "clamp_count": self.filt.clamp_count,
            "stft_y": self._stft_y._buf.copy(),
            "stft_x": self._stft_x._buf.copy(),
            "ola": self._istft._ola.copy(),
            "mirror_buf": self._mirror._buf.copy(),
            "mirror_pos": self._mirror._pos,
            "x_prev": self._x_prev.copy(),
            "ref_hist": None if self._ref_hist is None else self._ref_hist.copy(),
            "mask_state": None if self._mask_state is None else self._mask_state.copy(),
            "vv_state": None if self._vv_state is None else self._vv_state.copy(),
            "dd_state": None if self._dd_state is None else self._dd_state.copy(),
            "smoothed_vv": None if self._classical is None else self._classical.smoothed_vv.copy(),
            "frames_seen": self.frames_seen,
        }

    def restore(self, snap):
        """Reset all stream state to a snapshot taken on this processor."""
        self.filt.W = snap["W"].copy()
        self.filt.P = snap["P"].copy()
        self.filt.X_hist = snap["X_hist"].copy()
        self.filt.clamp_count = snap["clamp_count"]
        self._stft_y._buf = snap["stft_y"].copy()
        self._stft_x._buf = snap["stft_x"].copy()
        self._istft._ola = snap["ola"].copy()
        self._mirror._buf = snap["mirror_buf"].copy()
        self._mirror._pos = snap["mirror_pos"]
        self._x_prev = snap["x_prev"].copy()
        if snap["ref_hist"] is not None:
            self._ref_hist = snap["ref_hist"].copy()
        if snap["mask_state"] is not None:
            self._mask_state = snap["mask_state"].copy()
        if snap["vv_state"] is not None:
            self._vv_state = snap["vv_state"].copy()
        if snap["dd_state"] is not None:
            self._dd_state = snap["dd_state"].copy()
        if snap["smoothed_vv"] is not None:
            self._classical.smoothed_vv = snap["smoothed_vv"].copy()
        self.frames_seen = snap["frames_seen"]
        self._tape = None
