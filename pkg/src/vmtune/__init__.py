"""Virtual-mechanism controller design, simulation and tuning.

Importing the package switches JAX to 64-bit floats; every simulation and
gradient in this library is computed in double precision.  Unless XLA_FLAGS
already says otherwise, the CPU backend is also switched to its compiled
(non-thunk) runtime, which runs the long integration loops several times
faster.  This only takes effect if no JAX computation ran before the import.
"""

import os

_flags = os.environ.get("XLA_FLAGS", "")
if "xla_cpu_use_thunk_runtime" not in _flags:
    os.environ["XLA_FLAGS"] = (_flags + " --xla_cpu_use_thunk_runtime=false").strip()

import jax  # noqa: E402

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
