"""Cross-modal entity tracking: a differentiable entity-library memory model,
memory-network / feed-forward / recurrent competitors, a balanced synthetic
dataset generator, an SGD trainer with gradient verification, and an
evaluation harness."""

__version__ = "0.1.0"
