"""Loss, optimizer, synthetic data and the toy training loop."""
