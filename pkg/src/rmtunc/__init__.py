"""Random-matrix uncertainty models for manipulator motion and cable-system wrenches.

Submodules:

* :mod:`rmtunc.linalg`, :mod:`rmtunc.specfun`, :mod:`rmtunc.randmat`: numerical building blocks
* :mod:`rmtunc.jacobian_models`: additive, Wishart and Gaussian-noise-matrix motion models
* :mod:`rmtunc.manipulator`: planar three-link arm, tasks and ground-truth simulation
* :mod:`rmtunc.calibration`: fitting the motion models to measured ensembles
* :mod:`rmtunc.wrench`: force covariance of multi-agent cable systems
* :mod:`rmtunc.filter`: particle filtering with the motion models
"""

from .errors import ConfigError, RmtError
from .specfun import RngStream

__version__ = "0.1.0"

__all__ = ["ConfigError", "RmtError", "RngStream", "__version__"]
