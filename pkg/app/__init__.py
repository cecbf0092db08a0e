"""Post-training low-rank compression of attention and MLP blocks."""
