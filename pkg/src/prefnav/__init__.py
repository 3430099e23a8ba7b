"""Preference-aligned terrain navigation from self-supervised terrain features.

Subpackages/modules:

* ``geometry``   flat-ground homography, BEV projection, patch extraction
* ``signals``    PSD features of inertial / proprioceptive / tactile windows
* ``nn``         small numpy network library with reverse-mode gradients and Adam
* ``selfsup``    VICReg-style viewpoint-invariance and multi-modal objectives, training
* ``preference`` k-means + silhouette, ranking ingestion, utility learning
* ``planner``    constant-curvature arc planner with discounted terrain cost
* ``simworld``   deterministic synthetic terrain world, rollouts, evaluation
* ``cli``        command-line pipeline driver
"""

from prefnav.errors import ConfigurationError, UsageError

__all__ = ["ConfigurationError", "UsageError"]
__version__ = "0.1.0"
