"""Pre-training and seq2seq fine-tuning on encoded SPARQL queries."""

__version__ = "0.1.0"
