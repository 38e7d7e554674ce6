"""Detection Equity Audit."""
