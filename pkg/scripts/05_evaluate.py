import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(PROJECT_ROOT))

import pandas as pd

from src.cli import dispatch

REFS = Path("data/synthetic/refs.tsv")
OUT = Path("reports/eval_fusion")


def main():
    print("\n=== STAGE 05: WER / WERR ===")
    code = dispatch([
        "evaluate", "--refs", str(REFS), "--hyps", "reports/decode_fusion/hyps.tsv",
        "--baseline", "no-lm=reports/decode_no_lm/hyps.tsv", "--plots",
        "--output-dir", str(OUT),
    ])
    if code != 0:
        return code

    print("\n--- Per-language report ---")
    print(pd.read_csv(OUT / "report.csv").to_string(index=False))
    print(f"\nSaved figures under {OUT / 'figures'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
