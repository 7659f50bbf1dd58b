"""Training, evaluation, video propagation and the command line."""
