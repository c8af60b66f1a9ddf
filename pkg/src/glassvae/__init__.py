"""Graph-VAE pipeline for periodic atomic configurations.

Submodules:
    trajio          trajectory parsing, energy joining, normalization, splits
    periodic_graph  cutoff graphs under periodic boundaries, RDF histograms
    autodiff        reverse-mode AD kernel (float64, CPU)
    model           dual-path encoder, decoder heads, energy predictor
    losses          the five-term physics-regularized objective
    trainer         Adam training loop with gradient clipping
    generator       random and energy-conditioned latent sampling
    metrics         RMSE / R2 / BCE reports and RDF comparisons
    cli             command-line pipeline driver
"""

__version__ = "0.1.0"
