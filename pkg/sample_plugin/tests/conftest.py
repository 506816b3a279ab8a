import shutil
import subprocess
from pathlib import Path

import pytest

ROOT = Path(__file__).parent.parent
BUILD = ROOT / "build"


@pytest.fixture(scope="session")
def plugin_builds():
    """Build the plugins once per session; skip without a C++ compiler."""
    if shutil.which("g++") is None and shutil.which("clang++") is None:
        pytest.skip("no C++ compiler available")
    proc = subprocess.run(["sh", str(ROOT / "build.sh")],
                          capture_output=True, text=True)
    if proc.returncode != 0:
        pytest.fail(f"plugin build failed:\n{proc.stdout}\n{proc.stderr}")
    return {
        "sample": BUILD / "vbt_sample_plugin.so",
        "bad": BUILD / "vbt_bad_plugin.so",
        "abi2": BUILD / "vbt_abi2_plugin.so",
    }
