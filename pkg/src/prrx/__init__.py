"""Carrier-less, polarization-diversity direct-detection receiver.

The package simulates a dual-polarization Nyquist QPSK/QAM link whose
receiver measures only four intensities (before and after a dispersive
element, per polarization) and recovers the optical field with a modified
Gerchberg-Saxton phase-retrieval loop followed by 2x2 MIMO equalization.
"""

__version__ = "0.1.0"
