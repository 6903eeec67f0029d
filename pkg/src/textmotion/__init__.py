"""Text-conditioned human motion diffusion: static-pose pretraining, temporal fine-tuning, evaluation."""
