"""Online multicalibration and swap-style regret via expected variational
inequalities: bodies and oracles, no-regret learners, a certified EVI
solver, forecasting engines, decision-making reductions, and a run
harness with a CLI."""

__version__ = "0.1.0"
