"""Configuration, errors, run monitoring, IPD I/O and the command-line workbench."""
