"""
Breaking the loop with a frequency-domain Kalman filter
=======================================================

The suppressor sits between the microphone and the amplifier.  Per STFT bin
it runs a small Kalman filter whose state is the feedback path: it predicts
which part of each microphone frame is the loudspeaker coming back, subtracts
that prediction, and sends only the residual to the amplifier.  The filter
never sees the true room response — it identifies it on the fly, inside the
running loop, from the loudspeaker signal it mirrors internally.
"""

import dataclasses
import os

import numpy as np

from howlkit import (
    IdentityAhs,
    KalmanAhs,
    SceneSampler,
    run_scene,
    sdr,
    spectrogram_pgm,
    write_wav,
)

FS = 16000
OUT = os.path.join(os.path.dirname(__file__), "out", "02_kalman_suppression")
os.makedirs(OUT, exist_ok=True)

# Draw reproducible scenes: random shoebox rooms, random talker/speaker/mic
# placement, synthetic speech, coupling hot enough that an unprotected loop
# howls at moderate gain.
sampler = SceneSampler(seed=0, split="test", duration=4.0)
scenes = sampler.scenes(5)

print("loop gain 2.0, five random rooms")
print("scene   unprotected          with FDKF")
for i, scene in enumerate(scenes):
    scene = dataclasses.replace(scene, gain=2.0)

    bare = run_scene(scene, IdentityAhs())
    kalman = run_scene(scene, KalmanAhs.for_scene(scene))

    def describe(res):
        howl = ("howl@%.1fs" % (res.howl_event / FS)
                if res.howl_event is not None else "no howl  ")
        return "%s %+7.2f dB" % (howl, sdr(scene.target(), res.s_hat_aligned()))

    print(f"  {i}    {describe(bare)}   {describe(kalman)}")

# ---------------------------------------------------------------------------
# Keep one scene's audio around for listening and looking.
scene = scenes[0]
bare = run_scene(scene, IdentityAhs())
kalman = run_scene(scene, KalmanAhs.for_scene(scene))

write_wav(os.path.join(OUT, "dry_speech.wav"), scene.target(), FS, fmt="pcm16")
write_wav(os.path.join(OUT, "mic_unprotected.wav"),
          np.clip(bare.y, -1, 1), FS, fmt="pcm16")
write_wav(os.path.join(OUT, "suppressed.wav"),
          np.clip(kalman.s_hat, -1, 1), FS, fmt="pcm16")
spectrogram_pgm(bare.y, os.path.join(OUT, "mic_unprotected.pgm"))
spectrogram_pgm(kalman.s_hat, os.path.join(OUT, "suppressed.pgm"))

# The filter needs a moment to identify the path: the first few hundred
# milliseconds pass through almost untouched, then the estimate locks in and
# the feedback component drops away.
err = np.abs(kalman.s_hat - kalman.s[: len(kalman.s_hat)])
half = FS // 2
print("\nresidual feedback, first half second vs the rest: "
      f"{np.mean(err[:half]):.4f} -> {np.mean(err[half:]):.4f}")
print(f"artifacts in {OUT}")
