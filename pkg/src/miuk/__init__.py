"""Multi-view relation extraction with uncertain-KG concept priors."""

__version__ = "0.1.0"
