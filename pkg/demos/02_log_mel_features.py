"""
From a waveform to a 128 x 321 log-mel matrix
=============================================

Synthesize a 45-second clip, cut a 30-second segment two ways (centre crop
and loudest window), and turn it into the log-mel matrix the raters read.
"""
import math

import numpy as np

from hitrank import features as F
from hitrank.features import AudioClip

sr = F.SAMPLE_RATE
t = np.arange(45 * sr) / sr

# a quiet 440 Hz tone whose last ten seconds jump to a loud 1 kHz tone
samples = 0.05 * np.sin(2 * np.pi * 440 * t)
loud = t >= 35
samples[loud] = 0.8 * np.sin(2 * np.pi * 1000 * t[loud])
clip = AudioClip(samples, sr)

# the STFT uses a 4096-sample Hamming window and a hop of 2048
mag = F.stft_magnitude(clip)
print("STFT frames x bins:", mag.shape)
print("1 kHz lands in bin", round(1000 * F.N_FFT / sr), "- last frame peaks at bin", int(np.argmax(mag[-1])))

# two ways to choose the 30 seconds that get encoded: the centre, or the loudest window
starts = {"mid30": (len(samples) - 30 * sr) / 2 / sr,
          "highlight": F.max_energy_start(clip, 30 * sr) / sr}
for strategy, start in starts.items():
    mel = F.extract(clip, strategy)
    print(f"{strategy:9s} starts near {start:5.1f} s -> log-mel {mel.shape}, "
          f"mean level {mel.mean():.2f}")

# scaling the waveform by g shifts every log-mel cell by 2 log g
noise = AudioClip(np.random.default_rng(0).normal(scale=0.1, size=3 * sr), sr)
diff = F.log_mel(AudioClip(3.0 * noise.samples, sr)) - F.log_mel(noise)
print(f"gain 3 shifts log-mel by {diff.mean():.6f} (2 log 3 = {2 * math.log(3):.6f})")
