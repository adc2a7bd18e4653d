"""LoRA adapter merging: diagnostics, baseline mergers, and preference-aligned
direction reweighting over a synthetic multi-task harness."""

__version__ = "0.1.0"
