#!/usr/bin/env python3
"""Smoke test for the weft_py extension module.

Build the module first, then run this script:

    cargo build -p weft-py --release
    python3 python/smoke_test.py

The script copies the built cdylib next to itself under the importable
module name, imports it, and exercises the main types and operations.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def locate_module() -> Path:
    candidates = [
        REPO / "target" / "release" / "libweft_py.so",
        REPO / "target" / "debug" / "libweft_py.so",
    ]
    for candidate in candidates:
        if candidate.exists():
            return candidate
    sys.exit("libweft_py.so not found; run `cargo build -p weft-py --release` first")


def main() -> None:
    stage_dir = Path(tempfile.mkdtemp(prefix="weft-py-"))
    shutil.copy(locate_module(), stage_dir / "weft_py.so")
    sys.path.insert(0, str(stage_dir))
    import weft_py

    # Line normalization.
    assert weft_py.normalize_line("Hello, World!") == "hello world"
    print("PASS normalize_line")

    # Metrics.
    assert weft_py.chrf_pp("the same text", "the same text") == 100.0
    assert weft_py.chrf_pp("aaaa", "bbbb") == 0.0
    assert abs(weft_py.word_edit_distance("a b c", "a x c") - 1 / 3) < 1e-12
    ppl = weft_py.per_char_perplexity("acgt" * 8, -32 * math.log(4.0), 32)
    assert abs(ppl - 4.0) < 1e-12
    assert abs(weft_py.relative_improvement(0.862, 1.0) - 13.8) < 1e-9
    print("PASS chrf_pp / word_edit_distance / per_char_perplexity")

    # Borda aggregation with a tie.
    scores = weft_py.borda(
        {
            "a": {"t1": 0.9, "t2": 0.5},
            "b": {"t1": 0.9, "t2": 0.1},
            "c": {"t1": 0.2, "t2": 0.9},
        }
    )
    assert scores["a"] > scores["b"]
    print("PASS borda")

    # PII checksums and anonymization.
    assert weft_py.luhn_valid("4111111111111111")
    assert not weft_py.luhn_valid("4111111111111112")
    assert weft_py.iban_valid("DE89 3704 0044 0532 0130 00")
    text, spans = weft_py.anonymize_text("mail me at someone@mail.example", seed=7)
    assert len(spans) == 1 and spans[0][0] == "Email"
    assert "someone@mail.example" not in text
    again, spans2 = weft_py.anonymize_text(text, seed=7)
    assert again == text and not spans2, "anonymization must be idempotent"
    print("PASS luhn_valid / iban_valid / anonymize_text")

    # Quality metrics.
    metrics = weft_py.score_document("The quick brown fox jumps over the lazy dog.")
    assert metrics["word_count"] == 9
    assert metrics["stopword_ratio"] is not None
    print("PASS score_document")

    # URL parsing.
    host, registrable, subdomains = weft_py.parse_host("https://a.b.c.d.e.example.com/x")
    assert subdomains == 5 and registrable == "example.com"
    assert weft_py.parse_host("http://   ") is None
    print("PASS parse_host")

    # Sampling math.
    budgets = weft_py.compute_budgets({"da": 14.2, "sv": 26.1, "en": 397.4})
    by_lang = {lang: (total, ratio) for lang, _, total, ratio in budgets}
    assert by_lang["da"][0] == 26.1 and abs(by_lang["da"][1] - 1.84) < 0.01
    assert by_lang["en"] == (397.4, 1.0)
    phases = weft_py.build_schedule({"aa": 10.0, "bb": 30.0}, total_budget=1_000_000)
    assert [p[0] for p in phases] == ["Initial", "Intermediate", "Final"]
    assert phases[0][1] == 75_000 and phases[1][1] == 675_000 and phases[2][1] == 250_000
    assert abs(phases[1][2]["bb"] - 0.75) < 1e-12
    print("PASS compute_budgets / build_schedule")

    # Tokenizer: train, round-trip, save/load, equity.
    samples = {
        "aa": "viens divi tris cetri pieci " * 200,
        "bb": "uks kaks kolm neli viis " * 200,
    }
    tok = weft_py.Tokenizer.train(samples, {"aa": 2000, "bb": 2000}, vocab_size=400, coverage=1.0)
    assert len(tok) >= 256
    for probe in ["viens kaks", "pavisam jauns teksts", "日本語", "a b 2024"]:
        assert tok.decode(tok.tokenize(probe)) == probe
    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "vocab.txt")
        tok.save(path)
        reloaded = weft_py.Tokenizer.load(path)
        assert reloaded.tokenize("viens kaks") == tok.tokenize("viens kaks")
    means, dispersion = tok.measure_equity(
        {"aa": ["viens divi tris", "cetri pieci viens"], "bb": ["uks kaks kolm", "neli viis uks"]}
    )
    assert set(means) == {"aa", "bb"} and dispersion >= 1.0
    print("PASS Tokenizer train/tokenize/decode/save/load/measure_equity")

    print("smoke test OK")


if __name__ == "__main__":
    main()
