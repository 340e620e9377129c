"""Safe model-based offline-to-online RL with world models, at desk scale."""

import jax

# Audits and the default training path run in double precision; float32 runs
# cast explicitly (see ``ExperimentConfig.precision``).
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
