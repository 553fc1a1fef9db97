"""Log-mel features and the MADI waveform augmentation chain."""

import numpy as np

from madi.features import (
    AugmentConfig,
    Waveform,
    augment_chain,
    augment_pitch,
    compute_fbank,
    fbank_bin_centers,
)

rate = 16000
t = np.arange(rate) / rate
tone = Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), rate)

feats = compute_fbank(tone, 80)
centers = fbank_bin_centers(80)
peak = int(np.argmax(feats.frames[0]))
print(f"{feats.num_frames} frames x {feats.dim} bins; 1 kHz tone peaks in bin {peak} (center {centers[peak]:.0f} Hz)")

# pitch by resampling: 440 Hz at factor 1.5 lands on 660 Hz, duration shrinks
a440 = Waveform(0.5 * np.sin(2 * np.pi * 440 * t), rate)
shifted = augment_pitch(a440, 1.5)
spec = np.abs(np.fft.rfft(shifted.samples))
print("pitch x1.5:", len(shifted), "samples, peak at", np.fft.rfftfreq(len(shifted), 1 / rate)[spec.argmax()], "Hz")

# pitch, then reverb, then masking, all drawn from one seeded generator
cfg = AugmentConfig(pitch_factor_range=(0.9, 1.1), reverb_decay=0.2, reverb_wet=0.3, mask_count=2, mask_span=0.05)
aug = augment_chain(tone, cfg, np.random.default_rng(0))
silent = np.mean(aug.samples == 0.0)
print(f"augmented: {len(aug)} samples, {100 * silent:.1f}% masked")
