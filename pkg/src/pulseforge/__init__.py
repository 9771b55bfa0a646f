"""pulseforge: heart-rate recovery from video, trainable and verifiable at desk scale.

The package bundles a reverse-mode differentiable tensor core, the neural
building blocks and full network for rPPG waveform extraction, a dynamic
hybrid loss, DSP post-processing (Butterworth + Welch), a synthetic
pulsatile-video benchmark, and an AdamW training loop, all behind one CLI.
"""

__version__ = "0.1.0"

from pulseforge.tensor import DiffTensor

__all__ = ["DiffTensor", "__version__"]
