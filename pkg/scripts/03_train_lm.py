import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

import pandas as pd

from src.cli import dispatch

MANIFEST = Path("data/synthetic/manifest.tsv")
VOCAB = Path("models/vocab.txt")
OUT = Path("models/lm")


def main():
    print("\n=== STAGE 03: TRAIN MoE LM (tiny preset) ===")
    code = dispatch([
        "train-lm", "--manifest", str(MANIFEST), "--vocab", str(VOCAB), "--preset", "tiny",
        "--steps", "400", "--warmup", "50", "--seq-len", "64", "--batch-size", "8",
        "--output-dir", str(OUT),
    ])
    if code != 0:
        return code

    log = pd.read_csv(OUT / "train_log.csv")
    print("\n--- Loss (every 50 steps) ---")
    print(log[log["step"] % 50 == 0][["step", "loss", "aux_loss"]].to_string(index=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
