import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

from src.cli import dispatch


def main():
    print("\n=== STAGE 06: LAMBDA SWEEP ===")
    return dispatch([
        "sweep-lambda", "--values", "0,0.1,...,0.5",
        "--lattices", "data/synthetic/lattices", "--vocab", "models/vocab.txt",
        "--lm", "models/lm/checkpoint", "--refs", "data/synthetic/refs.tsv",
        "--output-dir", "reports/sweep",
    ])


if __name__ == "__main__":
    sys.exit(main())
