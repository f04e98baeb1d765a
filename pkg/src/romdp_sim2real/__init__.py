"""PAC meta-policy learning on rich-observation MDPs from simulators, deployed without real-world feedback."""
from __future__ import annotations

__version__ = "0.1.0"
__all__ = ["__version__", "version_string"]


def version_string() -> str:
    """Package version with a git-describe suffix when run from a checkout."""
    import subprocess
    from pathlib import Path

    root = Path(__file__).resolve().parents[2]
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root,
                             capture_output=True, text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return __version__
    return f"{__version__}+g{out}" if out else __version__
