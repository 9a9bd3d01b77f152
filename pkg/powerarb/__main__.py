"""Entry point for powerarb module when run with python -m powerarb."""

from .main import cli

if __name__ == "__main__":
    cli()
