"""Allow `python -m pixelcontrast`."""

from .cli import main

main()
