"""Allow `python -m unpiv` as an alternative to the `unpiv` console script."""
from .cli import run

run()
