import json

import numpy as np
import pandas as pd
import pytest

from src.errors import ArgumentError
from src.eval_harness import (
    REPORT_COLUMNS,
    LangReport,
    WerBreakdown,
    aggregate,
    emit_report,
    load_report,
    plot_report,
    score_utterances,
    wer,
    werr,
)


def levenshtein(ref, hyp):
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1))
        prev = cur
    return prev[-1]


def utterance_frame(rows):
    return pd.DataFrame(rows, columns=["utt_id", "locale", "text"])


# --- wer --------------------------------------------------------------------

def test_wer_hand_examples():
    same = wer("a b c", "a b c")
    assert (same.substitutions, same.deletions, same.insertions) == (0, 0, 0)
    assert same.wer == 0

    sub = wer("a b c", "a x c")
    assert sub.substitutions == 1 and sub.errors == 1
    assert sub.wer == pytest.approx(1 / 3)

    ins = wer("a b", "a b c d")
    assert ins.insertions == 2 and ins.errors == 2
    assert ins.wer == pytest.approx(1.0)

    dele = wer("a b c", "")
    assert dele.deletions == 3 and dele.wer == pytest.approx(1.0)


def test_wer_can_exceed_one():
    assert wer("a", "b c d").wer == pytest.approx(3.0)


def test_wer_rejects_empty_reference():
    with pytest.raises(ArgumentError):
        wer("", "a")
    with pytest.raises(ArgumentError):
        WerBreakdown().wer


def test_wer_matches_levenshtein_on_random_pairs():
    rng = np.random.default_rng(0)
    words = ["ba", "da", "ga", "ka"]
    for _ in range(10_000):
        ref = [words[i] for i in rng.integers(0, 4, size=int(rng.integers(1, 21)))]
        hyp = [words[i] for i in rng.integers(0, 4, size=int(rng.integers(0, 21)))]
        b = wer(ref, hyp)
        assert b.errors == levenshtein(ref, hyp)
        assert b.insertions - b.deletions == len(hyp) - len(ref)
        assert (b.errors == 0) == (ref == hyp)


# --- werr -------------------------------------------------------------------

def test_werr_reproduces_reported_relatives():
    assert 0.043 <= werr(11.3, 10.8) <= 0.045
    assert round(werr(11.7, 10.8), 3) == 0.077
    assert werr(7.0, 7.0) == 0.0
    assert werr(10.0, 12.0) < 0


def test_werr_needs_positive_baseline():
    with pytest.raises(ArgumentError):
        werr(0.0, 1.0)


# --- aggregation ------------------------------------------------------------

def counts(locale, subs, ref_words, utt="u"):
    return {"utt_id": utt, "locale": locale, "substitutions": subs, "deletions": 0,
            "insertions": 0, "ref_words": ref_words}


def test_macro_and_micro_averages():
    utts = pd.DataFrame([counts("aa-AA", 1, 10), counts("bb-BB", 3, 50)])
    report = aggregate(utts)
    assert report.locales == ["aa-AA", "bb-BB"]
    assert report.macro_wer == pytest.approx(0.08)
    assert report.micro_wer == pytest.approx(4 / 60)

    single = aggregate(pd.DataFrame([counts("aa-AA", 1, 10)]))
    assert single.macro_wer == pytest.approx(single.per_language["aa-AA"].wer)


def test_empty_report_has_no_averages():
    report = aggregate(pd.DataFrame(columns=["utt_id", "locale", "substitutions", "deletions",
                                             "insertions", "ref_words"]))
    assert report.per_language == {}
    assert report.macro_wer is None and report.micro_wer is None


def test_shard_merge_invariance():
    rng = np.random.default_rng(1)
    words = ["ba", "da", "ga"]
    refs, hyps = [], []
    for i in range(60):
        loc = ["aa-AA", "bb-BB", "cc-CC"][i % 3]
        ref = " ".join(words[j] for j in rng.integers(0, 3, size=5))
        hyp = " ".join(words[j] for j in rng.integers(0, 3, size=int(rng.integers(3, 7))))
        refs.append((f"u{i}", loc, ref))
        hyps.append((f"u{i}", loc, hyp))
    refs, hyps = utterance_frame(refs), utterance_frame(hyps)

    whole = aggregate(score_utterances(refs, hyps))
    shards = [score_utterances(refs.iloc[s:s + 17], hyps) for s in range(0, 60, 17)]
    merged = aggregate(pd.concat(shards, ignore_index=True))
    assert merged.per_language == whole.per_language
    assert merged.macro_wer == whole.macro_wer


def test_missing_hypothesis_scores_as_deletions():
    refs = utterance_frame([("u1", "aa-AA", "a b c"), ("u2", "aa-AA", "d e")])
    hyps = utterance_frame([("u1", "aa-AA", "a b c")])
    scored = score_utterances(refs, hyps)
    assert scored.set_index("utt_id").loc["u2", "deletions"] == 2


def test_locale_filter_drops_missing_languages():
    utts = pd.DataFrame([counts("aa-AA", 1, 10), counts("bb-BB", 3, 50)])
    report = aggregate(utts, locales=["bb-BB", "zz-ZZ"])
    assert report.locales == ["bb-BB"]


def test_compare_against_baseline():
    utts = pd.DataFrame([counts("aa-AA", 1, 10), counts("bb-BB", 3, 50), counts("cc-CC", 2, 20)])
    report = aggregate(utts, baselines={"conf": {"aa-AA": 0.2, "bb-BB": 0.06, "cc-CC": 0.05}})
    c = report.compare("conf")
    assert (c.improved, c.tied, c.regressed) == (1, 1, 1)
    assert c.werr["aa-AA"] == pytest.approx(0.5)
    assert c.mean_werr_improved == pytest.approx(0.5)

    nested = aggregate(utts, baselines={"prev": report})
    assert nested.compare("prev").tied == 3


# --- output -----------------------------------------------------------------

def test_empty_report_csv_is_header_only(tmp_path):
    path = emit_report(LangReport({}), tmp_path / "report.csv")
    assert path.read_text().strip() == ",".join(REPORT_COLUMNS)


def test_csv_is_sorted_by_locale(tmp_path):
    utts = pd.DataFrame([counts("zz-ZZ", 1, 10), counts("aa-AA", 3, 50)])
    report = aggregate(utts, baselines={"base": {"aa-AA": 0.1, "zz-ZZ": 0.1}})
    df = pd.read_csv(emit_report(report, tmp_path / "report.csv"))
    assert list(df.columns) == REPORT_COLUMNS
    assert df["locale"].tolist() == ["aa-AA", "zz-ZZ"]
    assert df["werr"].tolist() == pytest.approx([0.4, 0.0])


def test_json_round_trip(tmp_path):
    utts = pd.DataFrame([counts("aa-AA", 1, 10), counts("bb-BB", 3, 50)])
    report = aggregate(utts, baselines={"base": {"aa-AA": 0.2, "bb-BB": 0.05}})
    path = emit_report(report, tmp_path / "report.json", fmt="json")
    assert load_report(path) == report
    data = json.loads(path.read_text())
    assert data["comparisons"]["base"]["improved"] == 1
    assert data["macro_wer"] == pytest.approx(0.08)


def test_unknown_format(tmp_path):
    with pytest.raises(ArgumentError):
        emit_report(LangReport({}), tmp_path / "r.xml", fmt="xml")


def test_plots_are_written(tmp_path):
    utts = pd.DataFrame([counts("aa-AA", 1, 10), counts("bb-BB", 3, 50)])
    report = aggregate(utts, baselines={"base": {"aa-AA": 0.2, "bb-BB": 0.05}})
    written = plot_report(report, tmp_path / "figures")
    assert [p.name for p in written] == ["wer_by_language.png", "werr_vs_base.png"]
    assert all(p.stat().st_size > 0 for p in written)
