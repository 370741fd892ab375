"""Knowledge-distilled physics-informed networks: teachers, compact students, and the tooling around them."""

__version__ = "0.1.0"
