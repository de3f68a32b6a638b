"""BBM92 entanglement-based QKD simulator and protocol stack.

Simulates photon-pair generation and detection for the dual-source
spatial-randomness basis-selection scheme and the conventional beam-splitter
scheme, matches coincidences, runs the two-party protocol (sifting, QBER
estimation, security check, Cascade reconciliation, Toeplitz privacy
amplification), and provides an experiment harness with a CLI.
"""

__version__ = "0.1.0"
