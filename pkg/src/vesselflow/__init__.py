"""Neural surrogates of parametric stirred-vessel flow fields.

Library layout mirrors the pipeline: `autodiff` (dense-network
derivatives), `model` (the coordinate network), `physics` (RANS/MRF
residual operators), `mms` (manufactured solution and forcing),
`dataset` (generation, storage, samplers), `objective` (losses),
`trainer` (optimization and studies), `tracer` (frozen-flow transport),
`evaluation` (metrics and reports), `cli` (command line).
"""

__version__ = "0.1.0"
