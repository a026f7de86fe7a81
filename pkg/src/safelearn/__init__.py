"""Safe learning-based quadrotor control with GP barrier certificates."""
