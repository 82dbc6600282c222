"""clearstream: frame-recurrent video enhancement engine.

Library layout:
    tensor   - dense tensors, numerical kernels, reverse-mode autodiff
    blocks   - composite layers (conv blocks, mixer blocks, decoder stages)
    model    - full enhancer assembly, presets, parameter/FLOP accounting
    runtime  - streaming inference and recurrent training
    degrade  - seeded synthetic degradation pipeline
    metrics  - PSNR/SSIM, evaluation reports, latency benchmarking
    fileio   - PPM frames, RBT1 tensors, RBCK checkpoints, clip directories
    cli      - command-line entry point
"""

__version__ = "0.1.0"
