"""Desk-scale multimodal sequence modelling: dynamic-resolution tiling, box tokens,
interleaved packing with next-token and visual-feature regression objectives,
a two-stage conditional de-tokenizer and LoRA fine-tuning, on a float64 autodiff kernel."""

__version__ = "0.1.0"
