"""Dynamic loss network laboratory."""
