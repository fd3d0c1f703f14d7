"""Continuous normalizing flows on 2D toys: train, prune, analyze.

Subpackages:
    rng      deterministic counter-based random streams
    net      the MLP vector field f(z, t, theta) with hand-rolled VJP/JVP
    odeint   fixed-step and adaptive integrators plus two gradient paths
    cnf      the flow itself: log-density, NLL, gradients, sampling
    prune    iterative magnitude pruning with LR rewinding (the training loop)
    hessian  curvature reports: extremal eigenvalues, trace, condition number
    data     seeded 2D synthetic datasets and splits
    eval     sample-quality metric, grid exports, the moons classifier
    cli      experiment runner (train / sweep / hessian / sample / classify)
"""

__version__ = "0.1.0"
