"""Question-answer text corpora and region image-text contrastive training for CAMs."""

__version__ = "0.1.0"
