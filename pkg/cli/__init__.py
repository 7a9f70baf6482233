"""EdgeFM - CLI package."""
