"""Micro-to-macro traffic modeling toolkit.

Pieces, in data-flow order:

* :mod:`nlflow.microsim` -- ring-road platoon simulation under a generic
  ACC + look-ahead + look-behind controller.
* :mod:`nlflow.stability` -- plant/string stability of the linearized
  controller.
* :mod:`nlflow.macrorecon` -- kernel-density reconstruction of macroscopic
  density/flow/speed fields from trajectories.
* :mod:`nlflow.nlpinn` / :mod:`nlflow.train` -- physics-informed learning of
  a nonlocal LWR model (kernel weights + fundamental diagram) from the
  reconstructed fields.
* :mod:`nlflow.fvsolve` -- finite-volume forward solver for the nonlocal
  conservation law (ground-truth generator for closed-loop tests).
* :mod:`nlflow.calib` -- genetic-algorithm calibration of the microscopic
  models from recorded drive data.
* :mod:`nlflow.pipeline` / :mod:`nlflow.sweep` / :mod:`nlflow.cli` --
  experiment orchestration.

Set ``NLFLOW_NUMBA=0`` to run the pure-numpy fallbacks of the accelerated
kernels (see :mod:`nlflow.accel`).
"""

__version__ = "0.1.0"
