"""Buffered flow matching for streaming video generation at toy scale.

Subpackage map:

- flowcore: interpolation paths, velocities, Euler steps, guidance
- partition: buffer partitioning schemes and noise-level grids
- toyworld: deterministic sprite videos and probes
- model: time-varying denoiser with windowed space-time attention
- trainer: mixed-scheme flow-matching training
- streamer: the rolling-buffer generation engine
- distiller: multistep fold-down of a guided teacher into a fast student
- evalkit: stream metrics and scheme-mixture ablations
- protocol: binary frame messages and JSON control records
- service: threaded TCP streaming server and a small client
- cli: train / distill / generate / stream / eval / ablate commands
"""

__version__ = "0.1.0"
