"""A scikit-learn shaped fixture package."""
