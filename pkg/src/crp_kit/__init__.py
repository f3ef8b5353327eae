"""Speech enhancement with a bridge SDE and a short-horizon fine-tuning stage.

Modules: ``spectral`` (STFT, compression, synthetic corpus), ``sde`` (BBED
process), ``autodiff`` and ``network`` (reverse-mode AD, score MLP, Adam,
EMA, checkpoints), ``sampler`` (reverse solvers), ``training`` (DSM,
fine-tuning and predictive stages), ``metrics`` and ``cli``.
"""
__version__ = "0.1.0"
