"""Certified bounds for Gaussian-process posterior means over boxes.

Main entry points: :func:`gp3.gp.fit`, :func:`gp3.verify.run_analysis`,
:func:`gp3.verify.lipschitz_envelope` and the recipes in :mod:`gp3.recipes`.
"""

__version__ = "0.1.0"
