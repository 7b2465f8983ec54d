"""Text pipeline: sub-word tokenizer and numeric-value handling.

Four value modes are supported when turning an event into tokens:

* VA        - raw value string appended to the description
* DSVA      - value split into single digits before appending
* DSVA_DPE  - DSVA plus per-digit place indices for the place embedding
* VC        - value bypasses the text entirely (handled by a value MLP)

The tokenizer is a BPE-trained, WordPiece-style greedy matcher with "##"
continuation pieces. Digit characters and the decimal point are atomic: they
are excluded from merge learning, so no learned token ever contains two
digits.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .errors import ConfigError, ContractError, InputError

SPECIAL_TOKENS = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"]
DIGIT_CHARS = "0123456789"
POINT = "."
VALUE_RE = re.compile(r"-?[0-9]+(\.[0-9]+)?$")

# place index for non-digit positions
PLACE_NONE = -100
PLACE_MIN = -5
PLACE_MAX = 9
N_PLACES = PLACE_MAX - PLACE_MIN + 1

VOCAB_FORMAT_VERSION = "medembed-vocab-1"

MAX_TOKENS = 48


class ValueStrategy(Enum):
    VA = "va"
    DSVA = "dsva"
    DSVA_DPE = "dsva_dpe"
    VC = "vc"

    @classmethod
    def parse(cls, s: str) -> "ValueStrategy":
        try:
            return cls(s.lower())
        except ValueError:
            raise ConfigError(
                f"unknown value mode '{s}' (expected va|dsva|dsva_dpe|vc)")


@dataclass(frozen=True)
class EventDescription:
    text: str
    value: str | None = None
    unit: str | None = None

    def __post_init__(self):
        if not self.text:
            raise InputError("event description text must be non-empty")
        if self.value is not None and not VALUE_RE.match(self.value):
            raise InputError(f"malformed numeric value string: {self.value!r}")


@dataclass
class TokenSequence:
    ids: list[int]
    places: list[int]  # PLACE_NONE at non-digit positions

    def __post_init__(self):
        if len(self.ids) != len(self.places):
            raise ContractError("ids and places must have equal length")


def _is_digitish(tok: str) -> bool:
    t = tok[2:] if tok.startswith("##") else tok
    return len(t) == 1 and (t in DIGIT_CHARS or t == POINT)


def _is_digit(tok: str) -> bool:
    t = tok[2:] if tok.startswith("##") else tok
    return len(t) == 1 and t in DIGIT_CHARS


class Vocabulary:
    """Sub-word vocabulary with learned BPE merges and atomic digit tokens."""

    def __init__(self, tokens: list[str], merges: list[tuple[str, str]]):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.merges = [tuple(m) for m in merges]
        for s in SPECIAL_TOKENS:
            if s not in self.token_to_id:
                raise InputError(f"vocabulary missing special token {s}")
        self._max_piece_len = max(
            len(t[2:]) if t.startswith("##") else len(t) for t in tokens)

    def __len__(self):
        return len(self.id_to_token)

    @property
    def pad_id(self):
        return self.token_to_id["[PAD]"]

    @property
    def cls_id(self):
        return self.token_to_id["[CLS]"]

    @property
    def sep_id(self):
        return self.token_to_id["[SEP]"]

    @property
    def mask_id(self):
        return self.token_to_id["[MASK]"]

    @property
    def unk_id(self):
        return self.token_to_id["[UNK]"]

    def digit_token_ids(self) -> set[int]:
        return {i for i, t in enumerate(self.id_to_token) if _is_digit(t)}

    # -- word level encode/decode --

    def encode_word(self, word: str) -> list[str]:
        """Greedy longest-match segmentation; unknown characters become [UNK]."""
        pieces: list[str] = []
        i = 0
        while i < len(word):
            prefix = "" if i == 0 else "##"
            match = None
            limit = min(len(word), i + self._max_piece_len)
            for j in range(limit, i, -1):
                cand = prefix + word[i:j]
                if cand in self.token_to_id:
                    match = cand
                    i = j
                    break
            if match is None:
                pieces.append("[UNK]")
                i += 1
            else:
                pieces.append(match)
        return pieces

    def encode(self, text: str) -> list[str]:
        tokens: list[str] = []
        for word in normalize_text(text).split():
            tokens.extend(self.encode_word(word))
        return tokens

    def decode(self, tokens: list[str]) -> str:
        words: list[str] = []
        for tok in tokens:
            if tok in ("[PAD]", "[CLS]", "[SEP]"):
                continue
            if tok.startswith("##") and words:
                words[-1] += tok[2:]
            else:
                words.append(tok)
        return " ".join(words)

    # -- serialization (bit-exact round trip) --

    def to_json(self) -> str:
        return json.dumps({
            "format_version": VOCAB_FORMAT_VERSION,
            "tokens": self.id_to_token,
            "merges": [list(m) for m in self.merges],
        }, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def from_json(cls, s: str) -> "Vocabulary":
        obj = json.loads(s)
        if obj.get("format_version") != VOCAB_FORMAT_VERSION:
            raise InputError("unsupported vocabulary format version")
        return cls(obj["tokens"], [tuple(m) for m in obj["merges"]])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as f:
            return cls.from_json(f.read())


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def _word_to_symbols(word: str) -> tuple[str, ...]:
    return tuple(c if i == 0 else "##" + c for i, c in enumerate(word))


def train_tokenizer(corpus: list[str], target_vocab_size: int = 2048) -> Vocabulary:
    """Learn BPE merges by greedy pair frequency over a whitespace-split corpus.

    Digit and decimal-point symbols never participate in merges, so values
    always tokenize into single digits.
    """
    if not corpus:
        raise InputError("tokenizer corpus is empty")
    if target_vocab_size < 64:
        raise ConfigError("target_vocab_size must be at least 64")

    word_freq = Counter()
    for line in corpus:
        for w in normalize_text(line).split():
            word_freq[w] += 1

    words = {w: _word_to_symbols(w) for w in word_freq}

    base: set[str] = set()
    for syms in words.values():
        base.update(syms)
    # digit variants are always present so numeric strings tokenize anywhere
    for c in DIGIT_CHARS + POINT:
        base.add(c)
        base.add("##" + c)

    tokens = list(SPECIAL_TOKENS)
    tokens += [c for c in DIGIT_CHARS] + [POINT]
    tokens += sorted(t for t in base if t not in tokens)

    merges: list[tuple[str, str]] = []
    merged_tokens: list[str] = []
    budget = target_vocab_size - len(tokens)
    while budget > 0:
        pair_freq = Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for a, b in zip(syms, syms[1:]):
                if _is_digitish(a) or _is_digitish(b):
                    continue
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        # deterministic: highest frequency, lexicographic tie-break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if pair_freq[best] < 2:
            break
        a, b = best
        new_tok = a + b[2:] if b.startswith("##") else a + b
        merges.append(best)
        merged_tokens.append(new_tok)
        budget -= 1
        for w, syms in words.items():
            out = []
            i = 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(new_tok)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = tuple(out)

    tokens += merged_tokens
    return Vocabulary(tokens, merges)


def split_value_digits(value: str) -> str:
    """"1351" -> "1 3 5 1"; "7.5" -> "7 . 5"; sign kept attached to nothing."""
    return " ".join(value)


def render_event_text(event: EventDescription, strategy: ValueStrategy) -> str:
    """Description plus value text under aggregation strategies (not VC)."""
    if strategy == ValueStrategy.VC:
        raise ContractError("VC does not render values into text")
    parts = [normalize_text(event.text)]
    if event.value is not None:
        if strategy == ValueStrategy.VA:
            parts.append(event.value)
        else:  # DSVA / DSVA_DPE
            parts.append(split_value_digits(event.value))
    if event.unit:
        parts.append(normalize_text(event.unit))
    return " ".join(parts)


def render_description(event: EventDescription, strategy: ValueStrategy) -> str:
    """Text fed to the tokenizer for any strategy (VC drops the value)."""
    if strategy == ValueStrategy.VC:
        parts = [normalize_text(event.text)]
        if event.unit:
            parts.append(normalize_text(event.unit))
        return " ".join(parts)
    return render_event_text(event, strategy)


def digit_place_indices(tokens: list[str]) -> list[int]:
    """Place value per digit token, clamped to [-5, 9]; PLACE_NONE elsewhere.

    A contiguous run of digit/point tokens is treated as one number: digits
    left of the point get places n..1 (leftmost highest), digits right of the
    point get -1, -2, ...
    """
    places = [PLACE_NONE] * len(tokens)
    i = 0
    while i < len(tokens):
        if not _is_digitish(tokens[i]):
            i += 1
            continue
        j = i
        while j < len(tokens) and _is_digitish(tokens[j]):
            j += 1
        run = tokens[i:j]
        point_pos = next((k for k, t in enumerate(run) if not _is_digit(t)), len(run))
        for k in range(len(run)):
            if not _is_digit(run[k]):
                continue
            if k < point_pos:
                p = point_pos - k
            else:
                p = point_pos - k  # negative: first digit after the point is -1
            places[i + k] = max(PLACE_MIN, min(PLACE_MAX, p))
        i = j
    return places


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_TOKENS,
             with_places: bool = False) -> TokenSequence:
    """[CLS]-prefixed greedy sub-word tokenization, truncated to max_len."""
    pieces = vocab.encode(text)
    if with_places:
        places = [PLACE_NONE] + digit_place_indices(pieces)
    else:
        places = [PLACE_NONE] * (len(pieces) + 1)
    ids = [vocab.cls_id] + [vocab.token_to_id.get(p, vocab.unk_id) for p in pieces]
    return TokenSequence(ids[:max_len], places[:max_len])


@dataclass
class ValueNormalizer:
    """Per-code z-score statistics fitted on the training split (VC mode)."""

    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def fit(self, code_values: list[tuple[str, float]]) -> "ValueNormalizer":
        groups: dict[str, list[float]] = {}
        for code, v in code_values:
            groups.setdefault(code, []).append(v)
        for code, vals in groups.items():
            n = len(vals)
            mu = sum(vals) / n
            var = sum((v - mu) ** 2 for v in vals) / n
            self.stats[code] = (mu, var ** 0.5)
        return self

    def transform(self, code: str, value: str | None) -> tuple[float, bool]:
        """(z-scored value, present flag); missing value -> (0.0, False)."""
        if value is None:
            return 0.0, False
        try:
            v = float(value)
        except ValueError:
            raise InputError(f"unparseable numeric value {value!r}")
        mu, sd = self.stats.get(code, (0.0, 1.0))
        if sd == 0.0:
            sd = 1.0
        return (v - mu) / sd, True
