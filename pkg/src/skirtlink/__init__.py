"""skirtlink: link-level simulator for mask-filling wideband microwave transmission."""

__version__ = "0.1.0"
