import pathlib
import re

import pytest

from langlift.tokenizer import Kind, VocabEntry, Vocabulary, load_vocab, merge_vocab

REPO = pathlib.Path(__file__).resolve().parent.parent
FIXTURES = REPO / "fixtures"


def pytest_runtest_logreport(report):
    """One pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    m = re.search(r"test_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    verdict = "PASS" if report.passed else "FAIL"
    label = m.group(2).replace("_", " ")
    print(f"\nACCEPTANCE #{int(m.group(1)):02d} {verdict}: {label}", flush=True)


def make_vocab(normals=(), controls=("<unk>", "<s>", "</s>", "<pad>"), scores=None):
    """Programmatic vocabulary: controls, the 256 byte entries, then normals."""
    entries = []
    for name in controls:
        entries.append(VocabEntry(name.encode(), 0.0, Kind.CONTROL, len(entries)))
    for b in range(256):
        entries.append(VocabEntry(bytes([b]), 0.0, Kind.BYTE, len(entries)))
    for i, s in enumerate(normals):
        score = scores[i] if scores else -float(i)
        entries.append(VocabEntry(s.encode(), score, Kind.NORMAL, len(entries)))
    return Vocabulary(entries)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def base_vocab():
    return load_vocab(str(FIXTURES / "llama2_subset.vocab"))


@pytest.fixture(scope="session")
def ext_vocab():
    return load_vocab(str(FIXTURES / "ko_subset.vocab"))


@pytest.fixture(scope="session")
def merged_vocab(base_vocab, ext_vocab):
    merged, _ = merge_vocab(base_vocab, ext_vocab)
    return merged
