"""Domain-routed encoder-decoder lexicon generation on a small numpy autodiff core."""

__version__ = "0.1.0"
