"""Flow-matching RGB-to-thermal image translation, built from scratch on numpy.

The package trains a latent flow-matching model (transformer velocity
network with adaptive-layernorm conditioning) on paired RGB/thermal
images, with a bank of learnable per-dataset style embeddings and
classifier-free guidance at sampling time.  Hot numeric kernels have
numba-jitted implementations with pure-numpy fallbacks selected by the
``THERMOFLOW_NUMBA`` environment variable.
"""

__version__ = "0.1.0"

SCHEMA_VERSION = 1

from .tensor import Tensor, Tape, backward  # noqa: E402,F401
