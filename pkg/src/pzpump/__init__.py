"""Two-scale piezo-poroelastic homogenization and peristaltic-pumping toolkit."""

__version__ = "0.1.0"
