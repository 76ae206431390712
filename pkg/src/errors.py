"""Common exception base for the supply chain design library."""


class SupplyChainError(Exception):
    """Base class for all domain errors raised by this package."""
