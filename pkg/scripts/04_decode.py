import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

from src.cli import dispatch

LATTICES = Path("data/synthetic/lattices")
VOCAB = Path("models/vocab.txt")
LM = Path("models/lm/checkpoint")

LAMBDA = 0.3


def main():
    print("\n=== STAGE 04: DECODE (no LM and shallow fusion) ===")
    common = ["decode", "--lattices", str(LATTICES), "--vocab", str(VOCAB), "--beam", "8"]

    code = dispatch(common + ["--lambda", "0", "--output-dir", "reports/decode_no_lm"])
    if code != 0:
        return code
    return dispatch(common + ["--lm", str(LM), "--lambda", str(LAMBDA),
                              "--output-dir", "reports/decode_fusion"])


if __name__ == "__main__":
    sys.exit(main())
