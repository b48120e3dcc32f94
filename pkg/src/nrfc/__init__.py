"""nrfc: compression codec for plane-factorized radiance fields.

The package covers the full path from a trainable triplane field to a
decodable byte container: volume rendering, learned feature-plane
transforms with hyper and factorized priors, a normative range coder, the
container mux/demux, the four-stage training schedule, and a CLI.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
