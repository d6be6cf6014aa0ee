"""Latent generative modelling with OT-coupled flow matching and a closed-form diversity SDE.

Modules
-------
rng, container, nn
    Seeded streams, the tensor file format, MLP with reverse mode and Adam.
synth
    Synthetic labelled motion sequences and 2D toy sets.
vq
    Windowed VQ autoencoder.
ot
    Exact minibatch optimal transport through the Kantorovich dual.
derode, divsde, baselines
    Deterministic drift model, diversity SDE sampler, VP/VE score SDEs.
metrics
    FID, KID, precision/recall, diversity, multimodality, accuracy.
pipeline, verify, cli
    Orchestration, numerical checks and the ``dsdfm`` command.
"""
__version__ = "0.1.0"
