"""File format package initialization."""
