import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

from src.cli import dispatch


def main():
    print("\n=== STAGE 07: PARAMETERS AND FLOPS PER PRESET ===")
    code = dispatch(["flops", "--compare", "--output-dir", "reports"])
    if code != 0:
        return code

    print("\n--- GLaM 64E (12 layers, d=768, V=16384) ---")
    return dispatch(["flops", "--layers", "12", "--dim", "768", "--experts", "64", "--vocab", "16384"])


if __name__ == "__main__":
    sys.exit(main())
