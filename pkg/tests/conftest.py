import sys
from pathlib import Path

ECHO_BACKEND = Path(__file__).parent / "fixtures" / "echo_backend.py"


def echo_argv(*extra: str) -> list[str]:
    return [sys.executable, str(ECHO_BACKEND), *extra]
