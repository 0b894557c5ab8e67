"""Speaker-annotated parallel corpus handling.

Loading (JSONL or four aligned text files), rule tokenization,
length/empty filtering, minimum-size talk filtering, frequency-cutoff
vocabularies, per-talk dev/test splits, and equal-source-length batches.
All stages are pure functions of (input, seed).
"""

from __future__ import annotations

import json
import hashlib
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from .seeding import derive_rng

UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN = "<unk>", "<s>", "</s>", "<pad>"
SPECIAL_TOKENS = [UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, PAD_TOKEN]
UNK_ID, BOS_ID, EOS_ID, PAD_ID = 0, 1, 2, 3


class DataError(Exception):
    """Malformed or inconsistent corpus input."""


@dataclass
class RawExample:
    """One aligned record as read from disk, sides still untokenized."""

    talk: str
    speaker: str
    src: str
    trg: str


@dataclass
class ParallelExample:
    talk: str
    speaker: str
    src: list[str]
    trg: list[str]


@dataclass
class EncodedExample:
    src: list[int]
    trg: list[int]
    speaker: int
    talk: str = ""


@dataclass
class Batch:
    examples: list[EncodedExample]

    @property
    def src_len(self) -> int:
        return len(self.examples[0].src)

    def __len__(self) -> int:
        return len(self.examples)


# ---------------------------------------------------------------------------
# loading


def _require_fields(record: dict, line_no: int) -> RawExample:
    for key in ("talk", "speaker", "src", "trg"):
        if key not in record:
            raise DataError(f"line {line_no}: record is missing field {key!r}")
        if not isinstance(record[key], str):
            raise DataError(f"line {line_no}: field {key!r} must be a string")
    return RawExample(record["talk"], record["speaker"], record["src"], record["trg"])


def load_corpus(path, fmt: str = "jsonl") -> list[RawExample]:
    """Read aligned records, preserving input order.

    ``jsonl``: one object per line with string fields talk/speaker/src/trg.
    ``parallel-text``: ``path`` is a prefix; reads path.src/.trg/.talk/.speaker,
    one item per line, all four files the same length.
    """
    if fmt == "jsonl":
        out = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
                if not isinstance(record, dict):
                    raise DataError(f"line {line_no}: expected a JSON object")
                out.append(_require_fields(record, line_no))
        return out
    if fmt == "parallel-text":
        sides = {}
        for ext in ("src", "trg", "talk", "speaker"):
            fpath = Path(f"{path}.{ext}")
            if not fpath.exists():
                raise DataError(f"missing file {fpath}")
            sides[ext] = fpath.read_text(encoding="utf-8").splitlines()
        lengths = {ext: len(v) for ext, v in sides.items()}
        if len(set(lengths.values())) != 1:
            raise DataError(f"aligned files disagree on length: {lengths}")
        return [
            RawExample(t, s, x, y)
            for t, s, x, y in zip(sides["talk"], sides["speaker"], sides["src"], sides["trg"])
        ]
    raise ValueError(f"unknown corpus format {fmt!r}")


# ---------------------------------------------------------------------------
# tokenization and preprocessing

_PUNCT = set(".,!?;:\"()[]{}«»…“”‘’—") | {"-", "'"}
# suffixes that keep their apostrophe ("don 't", "it 's"); everything else
# splits after it ("l' avion", "qu' elle")
_APOS_SUFFIXES = {"t", "s", "m", "d", "ll", "re", "ve"}
_WORD_RE = re.compile(r"\S+")


def _split_word(word: str) -> list[str]:
    if not word:
        return []
    if len(word) == 1 or all(ch in _PUNCT for ch in word):
        return [word]
    if word[0] in _PUNCT:
        return [word[0]] + _split_word(word[1:])
    if word[-1] in _PUNCT:
        return _split_word(word[:-1]) + [word[-1]]
    apos = word.find("'")
    if 0 < apos < len(word) - 1:
        head, tail = word[:apos], word[apos + 1 :]
        if tail.lower() in _APOS_SUFFIXES:
            return _split_word(head) + ["'" + tail]
        return [head + "'"] + _split_word(tail)
    for i, ch in enumerate(word):
        # internal hyphens stay attached ("well-known")
        if ch in _PUNCT and ch not in "'-":
            return _split_word(word[:i]) + [ch] + _split_word(word[i + 1 :])
    return [word]


def tokenize(text: str) -> list[str]:
    """Rule tokenizer: whitespace split, punctuation detached, apostrophe
    clitics split ("l' avion", "don 't"). Not equivalent to Moses."""
    tokens = []
    for word in _WORD_RE.findall(text):
        tokens.extend(_split_word(word))
    return tokens


@dataclass
class PreprocessReport:
    n_input: int = 0
    n_dropped_empty: int = 0
    n_dropped_long: int = 0
    n_kept: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def preprocess(
    raw: list[RawExample],
    max_len: int = 60,
    pretokenized: bool = False,
) -> tuple[list[ParallelExample], PreprocessReport]:
    """Lowercase, tokenize, and drop pairs with an empty side or a side
    longer than ``max_len`` tokens. Filtering is silent but counted."""
    report = PreprocessReport(n_input=len(raw))
    out = []
    for ex in raw:
        if pretokenized:
            src, trg = ex.src.lower().split(), ex.trg.lower().split()
        else:
            src, trg = tokenize(ex.src.lower()), tokenize(ex.trg.lower())
        if not src or not trg:
            report.n_dropped_empty += 1
            continue
        if len(src) > max_len or len(trg) > max_len:
            report.n_dropped_long += 1
            continue
        out.append(ParallelExample(ex.talk, ex.speaker, src, trg))
    report.n_kept = len(out)
    return out, report


def filter_talks(corpus: list[ParallelExample], min_sentences: int = 10) -> list[ParallelExample]:
    """Remove every pair belonging to a talk with fewer than ``min_sentences``
    surviving pairs."""
    counts = Counter(ex.talk for ex in corpus)
    return [ex for ex in corpus if counts[ex.talk] >= min_sentences]


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Token <-> id map with fixed special ids 0-3 (UNK, BOS, EOS, PAD)."""

    def __init__(self, tokens: list[str]):
        self._id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self._token_to_id = {tok: i for i, tok in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def token(self, idx: int) -> str:
        return self._id_to_token[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._id_to_token)

    def content_hash(self) -> str:
        payload = "\n".join(self._id_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self._id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary file {path} does not start with the special tokens")
        return cls(lines[len(SPECIAL_TOKENS) :])

    def extend_speakers(self, n_speakers: int) -> "Vocabulary":
        """Append one pseudo-token per speaker index (speaker-token mode)."""
        extra = [f"<spk_{i}>" for i in range(n_speakers)]
        return Vocabulary(self._id_to_token[len(SPECIAL_TOKENS) :] + extra)


def build_vocab(sentences, max_size: int = 40_000, min_count: int = 2) -> Vocabulary:
    """Most frequent tokens, ties broken lexicographically; tokens appearing
    fewer than ``min_count`` times are excluded (they map to UNK)."""
    counts = Counter()
    n_sentences = 0
    for sent in sentences:
        counts.update(sent)
        n_sentences += 1
    if n_sentences == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    eligible = [(tok, c) for tok, c in counts.items() if c >= min_count]
    eligible.sort(key=lambda item: (-item[1], item[0]))
    return Vocabulary([tok for tok, _ in eligible[:max_size]])


class SpeakerTable:
    """Dense index over speaker-id strings, canonical (sorted) order."""

    def __init__(self, speakers: list[str]):
        self._speakers = list(speakers)
        self._index = {s: i for i, s in enumerate(self._speakers)}
        if len(self._index) != len(self._speakers):
            raise DataError("duplicate speaker ids")

    @classmethod
    def from_corpus(cls, corpus: list[ParallelExample]) -> "SpeakerTable":
        return cls(sorted({ex.speaker for ex in corpus}))

    def __len__(self) -> int:
        return len(self._speakers)

    @property
    def speakers(self) -> list[str]:
        return list(self._speakers)

    def index(self, speaker: str) -> int | None:
        return self._index.get(speaker)

    def save(self, path):
        Path(path).write_text("\n".join(self._speakers) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SpeakerTable":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------------------
# splits and batches


def _group_by_talk(corpus: list[ParallelExample]) -> dict[str, list[ParallelExample]]:
    groups: dict[str, list[ParallelExample]] = defaultdict(list)
    for ex in corpus:
        groups[ex.talk].append(ex)
    return groups


def make_splits(
    corpus: list[ParallelExample],
    per_talk_dev: int = 2,
    per_talk_test: int = 2,
    seed: int = 0,
) -> tuple[list[ParallelExample], list[ParallelExample], list[ParallelExample]]:
    """Per-talk split: draw dev/test pairs uniformly from every talk so each
    talk appears in all three splits; remainder is the training set."""
    groups = _group_by_talk(corpus)
    train, dev, test = [], [], []
    need = per_talk_dev + per_talk_test
    for talk, examples in groups.items():
        if len(examples) < need + 1:
            raise DataError(
                f"talk {talk!r} has {len(examples)} pairs; needs at least {need + 1}"
            )
        rng = derive_rng(seed, "split", talk)
        drawn = rng.choice(len(examples), size=need, replace=False)
        dev_idx = set(drawn[:per_talk_dev].tolist())
        test_idx = set(drawn[per_talk_dev:].tolist())
        for i, ex in enumerate(examples):
            (dev if i in dev_idx else test if i in test_idx else train).append(ex)
    return train, dev, test


def encode_corpus(
    corpus: list[ParallelExample],
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
    speakers: SpeakerTable,
) -> list[EncodedExample]:
    out = []
    for ex in corpus:
        idx = speakers.index(ex.speaker)
        out.append(
            EncodedExample(
                src=src_vocab.encode(ex.src),
                trg=trg_vocab.encode(ex.trg),
                speaker=-1 if idx is None else idx,
                talk=ex.talk,
            )
        )
    return out


def make_batches(
    corpus: list[EncodedExample],
    batch_size: int = 32,
    seed: int = 0,
) -> list[Batch]:
    """Batches of up to ``batch_size`` examples sharing an exact source
    length; batch order is shuffled under the seed."""
    by_len: dict[int, list[EncodedExample]] = defaultdict(list)
    for ex in corpus:
        by_len[len(ex.src)].append(ex)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        for i in range(0, len(group), batch_size):
            batches.append(Batch(group[i : i + batch_size]))
    order = derive_rng(seed, "batches").permutation(len(batches))
    return [batches[i] for i in order]


# ---------------------------------------------------------------------------
# persistence and statistics


def save_corpus_jsonl(corpus: list[ParallelExample], path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus:
            fh.write(
                json.dumps(
                    {
                        "talk": ex.talk,
                        "speaker": ex.speaker,
                        "src": " ".join(ex.src),
                        "trg": " ".join(ex.trg),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def corpus_stats(corpus: list[ParallelExample]) -> dict:
    """Talk count, pair count, and sentences-per-talk mean/std."""
    per_talk = Counter(ex.talk for ex in corpus)
    n = len(per_talk)
    sizes = list(per_talk.values())
    mean = sum(sizes) / n if n else 0.0
    std = math.sqrt(sum((s - mean) ** 2 for s in sizes) / n) if n else 0.0
    return {
        "talks": n,
        "pairs": len(corpus),
        "speakers": len({ex.speaker for ex in corpus}),
        "avg_sentences_per_talk": mean,
        "std_sentences_per_talk": std,
    }
