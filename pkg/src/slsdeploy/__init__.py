"""FIR system level synthesis, controller realizations, and simulated cyber-physical deployments."""
