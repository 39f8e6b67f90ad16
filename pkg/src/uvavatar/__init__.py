"""360-degree avatar reconstruction, completion and editing in body-model UV space."""

__version__ = "0.1.0"
