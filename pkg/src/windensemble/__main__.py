"""``python3 -m windensemble``."""
from .cli import main

main()
