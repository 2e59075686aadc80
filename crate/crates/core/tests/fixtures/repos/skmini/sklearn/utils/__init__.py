"""Small helpers shared across the package."""


class Bunch(dict):
    """Container object exposing keys as attributes."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key)
