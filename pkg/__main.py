"""
Main application entry point
"""
import sys

from app.backend.v1.cli import main

if __name__ == "__main__":
    sys.exit(main())
