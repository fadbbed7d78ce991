"""Command-line handlers, one module per command group."""
