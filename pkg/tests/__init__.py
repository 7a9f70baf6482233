"""AI Prototyping Tool - Tests package."""
