"""Desk-scale video-language distillation: adapt a toy image VLM to video, pseudo-caption clips, train a dual encoder."""

__version__ = "0.1.0"
