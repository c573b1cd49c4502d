"""Room impulse responses: geometric simulation and learned IR fields."""

__version__ = "0.1.0"
