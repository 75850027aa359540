"""driftbench: test-time adaptation engine and streaming benchmark harness.

The package adapts a lightweight classifier head (feature normalization with
a learnable affine, a linear classifier, and an additive prompt vector) to
unlabeled target streams, and benchmarks three adapter families over
synthetic domain shifts:

* entropy minimization (``adapt_em``): Tent-style steps, confidence-filtered
  weighting, sharpness-aware variant;
* pseudo-labeling (``adapt_pl``): EMA-anchor teacher plus cross-entropy
  consistency, optional stochastic restore;
* backpropagation-free (``adapt_bpfree``): prototype recalibration (T3A-style),
  Laplacian maximum-likelihood output correction (LAME-style), and
  forward-only prompt search via CMA-ES (FOA-style).

``shiftgen`` builds seeded synthetic worlds and shift operators, ``harness``
runs streaming episodes and protocols, and ``cli`` wires everything into
reproducible command-line runs.
"""

__version__ = "0.1.0"

REPORT_SCHEMA = "driftbench-report/1"
