#!/usr/bin/env python3
"""
Test script to verify the package structure, imports and bundled assets.
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

def test_imports():
    """Test that all main imports work correctly"""
    print("🧪 Testing package imports...")

    try:
        from src.app.core.processor import LsgcProcessor
        from src.app.core.model import TransformerLM
        from src.app.core.lora import attach_lora
        print("✅ Core imports successful")

        from src.app.services.genmode import GenerationDetector
        from src.app.services.clsmode import ClassificationDetector
        from src.app.services.stegsynth import CorpusSynthesizer
        from src.app.services.trainer import train
        print("✅ Services imports successful")

        from src.cli.main import main
        print("✅ CLI imports successful")

        print("\n🎉 All imports successful!")
        return True

    except ImportError as e:
        print(f"❌ Import error: {e}")
        return False
    except Exception as e:
        print(f"❌ Unexpected error: {e}")
        return False

def test_package_structure():
    """Test that the package structure is correct"""
    print("\n📁 Testing package structure...")

    expected_files = [
        "src/__init__.py",
        "src/app/__init__.py",
        "src/app/config.py",
        "src/app/exceptions.py",
        "src/app/core/__init__.py",
        "src/app/core/numerics.py",
        "src/app/core/tokenizer.py",
        "src/app/core/model.py",
        "src/app/core/lora.py",
        "src/app/core/checkpoint.py",
        "src/app/core/processor.py",
        "src/app/services/__init__.py",
        "src/app/services/genmode.py",
        "src/app/services/clsmode.py",
        "src/app/services/stegsynth.py",
        "src/app/services/datapipe.py",
        "src/app/services/trainer.py",
        "src/app/services/metrics.py",
        "src/app/services/gradcheck.py",
        "src/app/prompts/__init__.py",
        "src/app/prompts/templates/default.txt",
        "src/app/schema/__init__.py",
        "src/app/schema/schemas.py",
        "src/app/data/seed_corpus.txt",
        "src/cli/__init__.py",
        "src/cli/main.py",
        "configs/default.ini",
        "configs/smoke.ini",
    ]

    missing_files = [file_path for file_path in expected_files if not Path(file_path).exists()]
    if missing_files:
        print(f"❌ Missing files: {missing_files}")
        return False
    print("✅ All expected files present")
    return True

def test_configs():
    """Test that the bundled run configurations load"""
    print("\n⚙️  Testing run configurations...")

    try:
        from src.app.config import load_run_config

        for path in sorted(Path("configs").glob("*.ini")):
            config = load_run_config(path)
            print(f"✅ {path}: preset {config.preset}, mode {config.train.mode.value}")
        return True
    except Exception as e:
        print(f"❌ Configuration error: {e}")
        return False

def main():
    """Main test function"""
    print("🚀 LSGC Steganalysis - Package Test")
    print("=" * 50)

    structure_ok = test_package_structure()
    imports_ok = test_imports()
    configs_ok = test_configs()

    if structure_ok and imports_ok and configs_ok:
        print("\n🎉 Package setup is correct!")
        print("\n📖 You can now:")
        print("1. Install the package: pip install -e .[dev]")
        print("2. Run the tests: pytest")
        print("3. Run the CLI: python -m src.cli.main --help")
    else:
        print("\n❌ Package setup has issues!")
        sys.exit(1)

if __name__ == "__main__":
    main()
