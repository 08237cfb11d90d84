"""Audio-visual speech separation on a synthetic bimodal toy world.

Subpackage map:

* :mod:`avsep.signal` -- STFT/iSTFT, waveform arithmetic, WAV I/O.
* :mod:`avsep.toyworld` -- synthetic speakers, utterances, mixtures,
  triplet/mixture samplers, dataset files.
* :mod:`avsep.extractors` -- frozen identity/phonetic embedding models.
* :mod:`avsep.separator` -- mask-based audio-visual separation network.
* :mod:`avsep.correlation` -- triplet and adversarial correlation losses.
* :mod:`avsep.metrics` -- SI-SNR, SDR/SIR/SAR, STOI.
* :mod:`avsep.training` -- training regimes, gradient checks, checkpoints.
* :mod:`avsep.cli` -- gen-data / pretrain / train / eval / scatter commands.
"""

__version__ = "0.1.0"

from .signal import StftConfig, Spectrogram, Waveform, istft, mix, stft  # noqa: F401
from .metrics import MetricReport, bss_eval, si_snr, stoi_desk  # noqa: F401
