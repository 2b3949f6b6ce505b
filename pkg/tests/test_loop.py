"""Closed-loop simulator: recursion correctness, howling, detector rules."""

import json

import numpy as np
import pytest

from howlkit.loop import (
    HowlDetectorConfig,
    IdentityAhs,
    LoopScene,
    SceneResult,
    detect_howl_run,
    run_scene,
    save_scene_result,
)
from howlkit.rooms import Rir, RoomSpec, convolve_batch, generate_rir
from howlkit.signals import TimeSignal
from howlkit.wavio import read_wav

FS = 16000
ROOM = RoomSpec(
    dimensions=(5.0, 4.0, 3.0),
    source_pos=(1.0, 1.0, 1.5),
    mic_pos=(3.5, 2.5, 1.5),
    rt60=0.25,
    max_rir_len=2000,
)


def noise_signal(seconds, seed, peak=0.5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(int(seconds * FS))
    return TimeSignal(peak * x / np.max(np.abs(x)), FS)


def test_gain_zero_breaks_loop():
    scene = LoopScene(noise_signal(0.5, 0), generate_rir(ROOM), gain=0.0, delay=0.15)
    res = run_scene(scene, IdentityAhs())
    np.testing.assert_array_equal(res.y, scene.near_end.samples[: len(res.y)])
    np.testing.assert_array_equal(res.d, np.zeros_like(res.d))


def test_geometric_impulse_recursion():
    s = np.zeros(100)
    s[0] = 1.0
    scene = LoopScene(
        TimeSignal(s, FS), Rir(np.array([1.0]), FS), gain=0.5, delay=10 / FS
    )
    res = run_scene(scene, IdentityAhs(), frame_size=1)
    expected = np.zeros(100)
    for k in range(10):
        expected[10 * k] = 0.5**k
    np.testing.assert_array_equal(res.y, expected)


def test_howling_emerges_with_identity_at_gain_two():
    # the path's DC gain (sum of non-negative taps) is well above 1/G, so the
    # loop saturates within a few delay round trips of buildup
    scene = LoopScene(noise_signal(2.0, 3), generate_rir(ROOM), gain=2.0, delay=0.15)
    res = run_scene(scene, IdentityAhs())
    assert res.howl_event is not None
    # after onset the loudspeaker rails against the clip
    tail = np.abs(res.x[res.howl_event + 2000 :])
    assert np.mean(tail > 0.9) > 0.5


class _PerturbedIdentity:
    """Identity that injects a spike at one global sample index."""

    latency = 0

    def __init__(self, at):
        self.at = at
        self._t = 0

    def __call__(self, frame):
        out = np.array(frame, dtype=np.float64)
        lo, hi = self._t, self._t + len(frame)
        if lo <= self.at < hi:
            out[self.at - lo] += 0.5
        self._t = hi
        return out


def test_causality_perturbation_waits_one_delay():
    rir = Rir(np.array([1.0, -0.4, 0.2]), FS)
    sig = noise_signal(0.2, 7, peak=0.2)
    at = 500
    scene = LoopScene(sig, rir, gain=1.0, delay=128 / FS)
    base = run_scene(scene, IdentityAhs(), frame_size=64)
    pert = run_scene(scene, _PerturbedIdentity(at), frame_size=64)
    d = scene.delay_samples
    np.testing.assert_array_equal(base.y[: at + d], pert.y[: at + d])
    assert pert.y[at + d] != base.y[at + d]  # rir tap 0 is nonzero


def test_frame_size_one_matches_frame_size_64():
    scene = LoopScene(
        noise_signal(0.2, 11),
        generate_rir(RoomSpec(**{**ROOM.__dict__, "max_rir_len": 400})),
        gain=1.5,
        delay=128 / FS,
    )
    a = run_scene(scene, IdentityAhs(), frame_size=1)
    b = run_scene(scene, IdentityAhs(), frame_size=64)
    for name in ("s", "y", "s_hat", "x", "d"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.howl_event == b.howl_event


class _Amplifier:
    latency = 0

    def __call__(self, frame):
        return 1e6 * np.asarray(frame, dtype=np.float64)


def test_saturation_bounds_all_loop_signals():
    rir = generate_rir(ROOM)
    scene = LoopScene(noise_signal(0.3, 5), rir, gain=3.0, delay=0.15, sat=1.0)
    res = run_scene(scene, _Amplifier())
    h_sum = np.sum(np.abs(rir.taps))
    assert np.max(np.abs(res.x)) <= 1.0
    assert np.max(np.abs(res.d)) <= h_sum + 1e-9
    assert np.max(np.abs(res.y)) <= 0.5 + h_sum + 1e-9
    assert np.all(np.isfinite(res.y))


def test_detector_quiet_never_fires():
    fired, carry = detect_howl_run(np.full(1000, 0.5), HowlDetectorConfig())
    assert not fired and carry == 0


def test_detector_sustained_run_fires():
    fired, _ = detect_howl_run(np.full(150, 1.2), HowlDetectorConfig())
    assert fired


def test_detector_interrupted_run_resets():
    samples = np.concatenate([np.full(99, 1.2), [0.0], np.full(99, 1.2)])
    fired, carry = detect_howl_run(samples, HowlDetectorConfig())
    assert not fired
    assert carry == 99


def test_detector_carry_spans_chunks():
    det = HowlDetectorConfig()
    chunks = [np.full(50, -1.5)] * 3
    carry = 0
    fired_seq = []
    for c in chunks:
        fired, carry = detect_howl_run(c, det, carry)
        fired_seq.append(fired)
    assert fired_seq == [False, False, True]


def test_detector_negative_excursions_count():
    fired, _ = detect_howl_run(np.full(120, -2.0), HowlDetectorConfig())
    assert fired


def test_run_scene_validation_errors():
    scene = LoopScene(noise_signal(0.1, 0), Rir(np.array([1.0]), FS), gain=1.0, delay=0.01)
    with pytest.raises(ValueError, match="duration"):
        run_scene(scene, IdentityAhs(), duration=5.0)
    with pytest.raises(ValueError, match="frame_size"):
        run_scene(scene, IdentityAhs(), frame_size=1000)
    with pytest.raises(ValueError, match="gain"):
        LoopScene(noise_signal(0.1, 0), Rir(np.array([1.0]), FS), gain=-1.0, delay=0.01)
    with pytest.raises(ValueError, match="delay"):
        LoopScene(noise_signal(0.1, 0), Rir(np.array([1.0]), FS), gain=1.0, delay=1e-6)
    with pytest.raises(ValueError, match="sample rate"):
        LoopScene(noise_signal(0.1, 0), Rir(np.array([1.0]), 8000), gain=1.0, delay=0.01)


def test_run_scene_is_deterministic():
    scene = LoopScene(noise_signal(0.3, 9), generate_rir(ROOM), gain=2.0, delay=0.16)
    a = run_scene(scene, IdentityAhs())
    b = run_scene(scene, IdentityAhs())
    for name in ("s", "y", "s_hat", "x", "d"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.howl_event == b.howl_event


def test_near_rir_reverberates_target():
    dry = noise_signal(0.1, 1)
    near = Rir(np.array([1.0, 0.0, 0.25]), FS)
    scene = LoopScene(dry, Rir(np.array([1.0]), FS), gain=1.0, delay=0.01, near_rir=near)
    np.testing.assert_array_equal(scene.target(), convolve_batch(dry.samples, near.taps))


def test_s_hat_aligned_shifts_by_latency():
    arr = np.arange(6, dtype=np.float64)
    res = SceneResult(
        s=arr, y=arr, s_hat=arr, x=arr, d=arr, howl_event=None,
        ahs_latency=2, sample_rate=FS, gain=1.0, delay_samples=160, seed=0,
    )
    np.testing.assert_array_equal(res.s_hat_aligned(), [2, 3, 4, 5, 0, 0])


def test_save_scene_result_roundtrip(tmp_path):
    scene = LoopScene(noise_signal(0.1, 2), Rir(np.array([1.0, 0.3]), FS), gain=1.2, delay=0.02, seed=42)
    res = run_scene(scene, IdentityAhs())
    manifest_path = save_scene_result(res, str(tmp_path), "scene000")
    manifest = json.loads(open(manifest_path).read())
    assert manifest["gain"] == 1.2
    assert manifest["seed"] == 42
    assert manifest["howl_event"] is None
    back = read_wav(str(tmp_path / manifest["files"]["y"]))
    assert back.sample_rate == FS
    np.testing.assert_allclose(back.samples, res.y, atol=1e-6)
