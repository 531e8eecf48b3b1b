"""Allow ``python -m sere`` as an alternative to the console script."""

from sere.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
