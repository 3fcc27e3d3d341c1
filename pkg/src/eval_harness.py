"""
WER scoring and per-language reporting.

Hypotheses and references are compared word by word after a plain whitespace
split; no text normalization is applied. Per-language WER pools edit counts over
all of a language's utterances, the macro average is the unweighted mean over
languages and the micro average pools every utterance.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src.errors import ArgumentError  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["locale", "wer", "baseline_wer", "werr"]
COUNT_COLUMNS = ["substitutions", "deletions", "insertions", "ref_words"]


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_words == 0:
            raise ArgumentError("WER is undefined without reference words")
        return self.errors / self.ref_words

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(self.substitutions + other.substitutions, self.deletions + other.deletions,
                            self.insertions + other.insertions, self.ref_words + other.ref_words)


def _words(x: Union[str, Sequence[str]]) -> List[str]:
    return x.split() if isinstance(x, str) else list(x)


def wer(ref: Union[str, Sequence[str]], hyp: Union[str, Sequence[str]]) -> WerBreakdown:
    """
    Minimal-cost word alignment with unit costs.

    Among minimal alignments the backtrace prefers a substitution (or match),
    then a deletion, then an insertion.
    """
    r, h = _words(ref), _words(hyp)
    if not r:
        raise ArgumentError("empty reference")
    n, m = len(r), len(h)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (r[i - 1] != h[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            s += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerBreakdown(int(s), d, ins, n)


def werr(baseline_wer: float, system_wer: float) -> float:
    """Relative WER reduction; negative means the system regressed."""
    if not baseline_wer > 0:
        raise ArgumentError(f"baseline WER must be > 0, got {baseline_wer}")
    return (baseline_wer - system_wer) / baseline_wer


def score_utterances(refs: pd.DataFrame, hyps: pd.DataFrame) -> pd.DataFrame:
    """
    Per-utterance edit counts from ``utt_id/locale/text`` frames.

    A reference without a hypothesis is scored against an empty hypothesis.
    """
    merged = refs.merge(hyps[["utt_id", "text"]], on="utt_id", how="left", suffixes=("_ref", "_hyp"))
    missing = int(merged["text_hyp"].isna().sum())
    if missing:
        logger.warning(f"{missing} reference utterance(s) have no hypothesis; scored as empty")
    merged["text_hyp"] = merged["text_hyp"].fillna("")
    rows = []
    for row in merged.itertuples(index=False):
        b = wer(row.text_ref, row.text_hyp)
        rows.append({"utt_id": row.utt_id, "locale": row.locale, "substitutions": b.substitutions,
                     "deletions": b.deletions, "insertions": b.insertions, "ref_words": b.ref_words})
    return pd.DataFrame(rows, columns=["utt_id", "locale"] + COUNT_COLUMNS)


@dataclass(frozen=True)
class Comparison:
    werr: Dict[str, float]
    improved: int
    tied: int
    regressed: int

    @property
    def mean_werr_improved(self) -> Optional[float]:
        gains = [v for v in self.werr.values() if v > 0]
        return float(np.mean(gains)) if gains else None


@dataclass(frozen=True)
class LangReport:
    per_language: Dict[str, WerBreakdown]
    baselines: Dict[str, Dict[str, float]] = field(default_factory=dict)  # name -> locale -> WER

    @property
    def locales(self) -> List[str]:
        return sorted(self.per_language)

    def wer_by_locale(self) -> Dict[str, float]:
        return {loc: self.per_language[loc].wer for loc in self.locales}

    @property
    def macro_wer(self) -> Optional[float]:
        if not self.per_language:
            return None
        return float(np.mean([b.wer for b in self.per_language.values()]))

    @property
    def micro_wer(self) -> Optional[float]:
        if not self.per_language:
            return None
        total = sum(self.per_language.values(), WerBreakdown())
        return total.wer

    def compare(self, baseline: str) -> Comparison:
        base = self.baselines[baseline]
        relative, improved, tied, regressed = {}, 0, 0, 0
        for loc in self.locales:
            if loc not in base:
                continue
            sys_wer = self.per_language[loc].wer
            if sys_wer < base[loc]:
                improved += 1
            elif sys_wer > base[loc]:
                regressed += 1
            else:
                tied += 1
            if base[loc] > 0:
                relative[loc] = werr(base[loc], sys_wer)
        return Comparison(relative, improved, tied, regressed)

    def to_dict(self) -> dict:
        out = {
            "per_language": {loc: {c: getattr(self.per_language[loc], c) for c in COUNT_COLUMNS}
                             for loc in self.locales},
            "baselines": {name: {loc: base[loc] for loc in sorted(base)}
                          for name, base in sorted(self.baselines.items())},
            "macro_wer": self.macro_wer,
            "micro_wer": self.micro_wer,
            "comparisons": {},
        }
        for name in sorted(self.baselines):
            c = self.compare(name)
            out["comparisons"][name] = {"improved": c.improved, "tied": c.tied, "regressed": c.regressed,
                                        "mean_werr_improved": c.mean_werr_improved}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LangReport":
        per_language = {loc: WerBreakdown(**counts) for loc, counts in data["per_language"].items()}
        baselines = {name: dict(base) for name, base in data.get("baselines", {}).items()}
        return cls(per_language, baselines)


BaselineLike = Union[LangReport, Mapping[str, float]]


def aggregate(
    utterances: pd.DataFrame,
    baselines: Optional[Mapping[str, BaselineLike]] = None,
    locales: Optional[Sequence[str]] = None,
) -> LangReport:
    """
    Pool per-utterance counts (``score_utterances`` output) by locale.

    ``baselines`` maps a name to a ``LangReport`` or to per-locale WERs. A
    listed locale with no utterances is left out with a warning.
    """
    per_language: Dict[str, WerBreakdown] = {}
    if not utterances.empty:
        sums = utterances.groupby("locale", sort=True)[COUNT_COLUMNS].sum()
        for loc, row in sums.iterrows():
            if row["ref_words"] == 0:
                logger.warning(f"locale {loc} has no reference words; omitted")
                continue
            per_language[str(loc)] = WerBreakdown(*(int(row[c]) for c in COUNT_COLUMNS))
    if locales is not None:
        for loc in locales:
            if loc not in per_language:
                logger.warning(f"locale {loc} has no utterances; omitted from report")
        per_language = {loc: b for loc, b in per_language.items() if loc in set(locales)}

    resolved = {}
    for name, base in (baselines or {}).items():
        resolved[name] = base.wer_by_locale() if isinstance(base, LangReport) else {k: float(v) for k, v in base.items()}
    return LangReport(per_language, resolved)


def report_frame(report: LangReport, baseline: Optional[str] = None) -> pd.DataFrame:
    if baseline is None and report.baselines:
        baseline = sorted(report.baselines)[0]
    base = report.baselines.get(baseline, {}) if baseline else {}
    rows = []
    for loc in report.locales:
        sys_wer = report.per_language[loc].wer
        b = base.get(loc)
        rows.append({"locale": loc, "wer": sys_wer, "baseline_wer": b,
                     "werr": werr(b, sys_wer) if b else None})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def emit_report(report: LangReport, path, fmt: str = "csv", baseline: Optional[str] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        report_frame(report, baseline).to_csv(path, index=False, float_format="%.6f")
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        raise ArgumentError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> LangReport:
    return LangReport.from_dict(json.loads(Path(path).read_text()))


def plot_report(report: LangReport, out_dir) -> List[Path]:
    """Per-language WER bars (system and every baseline) and per-baseline WERR bars."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    locales = report.locales
    if not locales:
        return []
    written = []

    names = ["system"] + sorted(report.baselines)
    width = 0.8 / len(names)
    x = np.arange(len(locales))
    plt.figure(figsize=(max(6, len(locales) * 0.6), 4))
    for i, name in enumerate(names):
        values = report.wer_by_locale() if name == "system" else report.baselines[name]
        plt.bar(x + i * width, [100 * values.get(loc, np.nan) for loc in locales], width, label=name)
    plt.xticks(x + width * (len(names) - 1) / 2, locales, rotation=90)
    plt.ylabel("WER (%)")
    plt.title("WER by language")
    plt.legend()
    plt.tight_layout()
    plt.savefig(out_dir / "wer_by_language.png")
    plt.close()
    written.append(out_dir / "wer_by_language.png")

    for name in sorted(report.baselines):
        rel = report.compare(name).werr
        plt.figure(figsize=(max(6, len(locales) * 0.6), 4))
        plt.bar(locales, [100 * rel.get(loc, np.nan) for loc in locales])
        plt.axhline(0, color="black", linewidth=0.8)
        plt.xticks(rotation=90)
        plt.ylabel("WERR (%)")
        plt.title(f"Relative WER reduction vs {name}")
        plt.tight_layout()
        target = out_dir / f"werr_vs_{name}.png"
        plt.savefig(target)
        plt.close()
        written.append(target)
    return written
