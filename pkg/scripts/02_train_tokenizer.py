import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

from src.cli import dispatch

MANIFEST = Path("data/synthetic/manifest.tsv")
OUT = Path("models")


def main():
    print("\n=== STAGE 02: SHARED WORDPIECE VOCAB ===")
    if not MANIFEST.exists():
        print(f"Missing {MANIFEST}; run 01_gen_synthetic.py first")
        return 1
    return dispatch(["train-tokenizer", "--manifest", str(MANIFEST), "--vocab-size", "4096",
                     "--output-dir", str(OUT)])


if __name__ == "__main__":
    sys.exit(main())
