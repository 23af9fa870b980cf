"""Online receding-horizon control of unknown constrained linear systems."""
