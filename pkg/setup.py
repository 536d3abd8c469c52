#!/usr/bin/env python3
"""
Setup Helper
============

Prepares a working copy of the local Gibbs toolkit:
1. checks the interpreter
2. installs requirements.txt into it
3. checks that every scientific package imports
4. writes config.json (or config.sample.json next to an existing one)
5. creates the output folder named in that config
"""

import importlib
import json
import subprocess
import sys
from pathlib import Path

MIN_PYTHON = (3, 8)
# Import name -> requirements.txt name
PACKAGES = {
    "numpy": "numpy",
    "scipy": "scipy",
    "pandas": "pandas",
    "yaml": "PyYAML",
    "markdown": "markdown",
    "rasterio": "rasterio",
}


def python_ok() -> bool:
    """Check the interpreter against MIN_PYTHON"""
    found = sys.version_info[:2]
    if found < MIN_PYTHON:
        print(f"❌ Python {MIN_PYTHON[0]}.{MIN_PYTHON[1]}+ needed, found {found[0]}.{found[1]}")
        return False
    print(f"✅ Python {found[0]}.{found[1]}")
    return True


def pip_install(requirements: Path = Path("requirements.txt")) -> bool:
    """Install the requirements file into the running interpreter"""
    if not requirements.exists():
        print(f"❌ {requirements} not found; run setup from the repository root")
        return False
    print(f"📦 pip install -r {requirements}")
    done = subprocess.run([sys.executable, "-m", "pip", "install", "-r", str(requirements)],
                          capture_output=True, text=True)
    if done.returncode != 0:
        print(done.stderr.strip().splitlines()[-1] if done.stderr.strip() else "❌ pip failed")
        return False
    return True


def missing_packages() -> list:
    """Requirement names whose import still fails"""
    missing = []
    for module, requirement in PACKAGES.items():
        try:
            importlib.import_module(module)
        except ImportError:
            missing.append(requirement)
    return missing


def write_config() -> Path:
    """Dump the built-in defaults; never overwrite an existing config.json"""
    from config import DEFAULT_CONFIG

    target = Path("config.json")
    if target.exists():
        target = Path("config.sample.json")
        print("⚠️ Keeping the existing config.json")
    target.write_text(json.dumps(DEFAULT_CONFIG, indent=2) + "\n", encoding="utf-8")
    print(f"⚙️ Wrote {target}")
    return target


def make_output_folder(config_file: Path) -> Path:
    """Create the output folder named in the config file"""
    from config import load_config

    output = Path(load_config(config_file)["folders"]["output"])
    output.mkdir(parents=True, exist_ok=True)
    print(f"📁 Output folder: {output}/")
    return output


def main() -> int:
    """Run every setup step; 0 on success"""
    print("🐾 Local Gibbs toolkit setup")
    print("=" * 30)

    if not python_ok() or not pip_install():
        return 1

    missing = missing_packages()
    if missing:
        print(f"❌ Still missing after install: {', '.join(missing)}")
        return 1
    print(f"✅ Imports fine: {', '.join(PACKAGES.values())}")

    config_file = write_config()
    make_output_folder(config_file)

    print()
    print("Try it:")
    print("  python workflow_orchestrator.py landscape -o habitat/")
    print("  python workflow_orchestrator.py simulate --raster habitat/habitat.yaml -o track.csv")
    print("  python workflow_orchestrator.py fit --raster habitat/habitat.yaml --tracks track.csv "
          "--reference-category W")
    print("  python -m unittest discover -p 'test_*.py'")
    print()
    print("Docs: docs/WORKFLOW_GUIDE.md (commands, formats), docs/CONFIG_TEMPLATE.md (settings)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
