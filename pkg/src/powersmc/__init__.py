"""Sequential Monte Carlo sampling from sequence-level power targets of toy autoregressive models."""
