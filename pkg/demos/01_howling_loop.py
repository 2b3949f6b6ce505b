"""
How a room starts to howl
=========================

A microphone, an amplifier and a loudspeaker share a room.  Whatever the
microphone picks up is amplified and played back, travels through the room,
and lands on the microphone again.  Once the round-trip gain of that loop
passes unity at any frequency, the system re-amplifies its own output until
the amplifier clips: acoustic howling.

This script builds one such room, closes the loop at a few gains, and shows
the exact moment the howl takes over.
"""

import os

import numpy as np

from howlkit import (
    IdentityAhs,
    LoopScene,
    Rir,
    RoomSpec,
    generate_rir,
    run_scene,
    sdr,
    spectrogram_pgm,
    synth_speech,
    write_wav,
)

FS = 16000
OUT = os.path.join(os.path.dirname(__file__), "out", "01_howling_loop")
os.makedirs(OUT, exist_ok=True)

# ---------------------------------------------------------------------------
# A talker, a room, and a feedback path.
#
# The near-end speech is synthetic (a seeded vowel-like harmonic chirp with
# pauses), so the whole demo is reproducible without any corpus.
speech = synth_speech(seed=7, duration=4.0)

room = RoomSpec(
    dimensions=(6.0, 4.5, 3.0),
    source_pos=(4.2, 1.4, 1.5),      # loudspeaker
    mic_pos=(1.5, 3.0, 1.4),
    rt60=0.3,
    sample_rate=FS,
    max_rir_len=1024,
)
feedback = generate_rir(room)

# Rescale the feedback path so its DC gain ("coupling") is 1.5: the
# loudspeaker is clearly audible at the microphone.  The loop's round-trip
# gain is amplifier gain x coupling, so unity sits at an amplifier gain of
# about 0.67 — the sweep below crosses it.
feedback = Rir(feedback.taps * (1.5 / np.sum(feedback.taps)), FS)

# ---------------------------------------------------------------------------
# Close the loop at increasing amplifier gains.  The suppressor slot gets an
# identity passthrough: nothing protects the loop.
print("gain   howl onset   SDR of mic signal vs dry speech")
for gain in (0.4, 0.6, 1.0, 2.0):
    scene = LoopScene(speech, feedback, gain=gain, delay=0.2)
    result = run_scene(scene, IdentityAhs())

    quality = sdr(scene.target(), result.s_hat_aligned())
    onset = ("%.2f s" % (result.howl_event / FS)
             if result.howl_event is not None else "none")
    print(f"{gain:4.1f}   {onset:>10}   {quality:+7.2f} dB")

    write_wav(os.path.join(OUT, f"mic_gain{gain:.1f}.wav"),
              np.clip(result.y, -1, 1), FS, fmt="pcm16")

# The howl also has a signature you can see: all the energy piles into the
# loop's favourite frequencies and stays there.
scene = LoopScene(speech, feedback, gain=2.0, delay=0.2)
result = run_scene(scene, IdentityAhs())
spectrogram_pgm(result.y, os.path.join(OUT, "mic_gain2.0.pgm"))
print(f"\nartifacts in {OUT}")
print("listen to mic_gain0.4.wav (clean) against mic_gain2.0.wav (howling),")
print("or open mic_gain2.0.pgm: the horizontal stripes are the howl.")
