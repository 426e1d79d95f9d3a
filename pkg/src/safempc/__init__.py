"""Safe Bayesian tuning of an RBF-shaped MPC stage cost."""
