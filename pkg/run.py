"""Entry point for the turbulence mitigation command-line tool."""
from src.main import main


if __name__ == "__main__":
    main()
