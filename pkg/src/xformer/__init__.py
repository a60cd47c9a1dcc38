"""Cross feature attention and the XFormer hybrid CNN/transformer in numpy."""

__version__ = "0.1.0"
