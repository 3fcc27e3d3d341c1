import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

from src.cli import dispatch

OUT = Path("data/synthetic")


def main():
    print("\n=== STAGE 01: SYNTHETIC RARE-ENTITY SET ===")
    code = dispatch(["gen-synthetic", "--output-dir", str(OUT), "--seed", "0"])
    if code == 0:
        print("\nSaved:")
        for name in ("manifest.tsv", "vocab.txt", "refs.tsv", "lattices/index.tsv"):
            print(f"- {OUT / name}")
    return code


if __name__ == "__main__":
    sys.exit(main())
