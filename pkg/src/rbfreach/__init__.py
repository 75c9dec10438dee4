"""Certified upper bounds on reach-avoid probabilities via Gaussian RBF sums."""
