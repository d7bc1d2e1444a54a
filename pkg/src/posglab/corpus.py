"""Tagged-corpus ingestion, vocabulary/POS partition construction, synthetic
grammars and a most-frequent-tag lexicon tagger.

Corpus file format: one ``surface<TAB>tag`` record per line, a blank line ends
a sequence, lines starting with ``#`` are comments.
"""

from __future__ import annotations

import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

UNK, BOS, EOS, PAD = "<unk>", "<bos>", "<eos>", "<pad>"
SPECIAL_TOKENS = (UNK, BOS, EOS, PAD)
UNK_ID, BOS_ID, EOS_ID, PAD_ID = range(4)
SPECIAL_TAG = "<SPECIAL>"
SPECIAL_POS_ID = 0


class CorpusFormatError(ValueError):
    """Malformed tagged-corpus input; carries the 1-based line and column."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f"line {line}" if line is not None else "input"
        if column is not None:
            where += f", column {column}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TaggedToken:
    surface: str
    tag: str

    def __post_init__(self):
        if not self.surface or any(c.isspace() for c in self.surface):
            raise ValueError(f"invalid surface {self.surface!r}")
        if not self.tag or any(c.isspace() for c in self.tag):
            raise ValueError(f"invalid tag {self.tag!r}")


@dataclass(frozen=True)
class TaggedCorpus:
    sequences: tuple[tuple[TaggedToken, ...], ...]

    def __post_init__(self):
        for i, seq in enumerate(self.sequences):
            if not seq:
                raise ValueError(f"sequence {i} is empty")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)

    def surfaces(self) -> list[list[str]]:
        return [[t.surface for t in s] for s in self.sequences]

    def tags(self) -> list[list[str]]:
        return [[t.tag for t in s] for s in self.sequences]

    @classmethod
    def from_pairs(cls, sequences: Iterable[Iterable[tuple[str, str]]]) -> "TaggedCorpus":
        return cls(tuple(tuple(TaggedToken(w, t) for w, t in seq) for seq in sequences))


def parse_tagged_corpus(stream: TextIO | str) -> TaggedCorpus:
    """Parse the two-column tagged format.

    ``stream`` may be a file object or the text itself.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    sequences: list[tuple[TaggedToken, ...]] = []
    current: list[TaggedToken] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if line.startswith("#"):
            continue
        if line == "":
            if current:
                sequences.append(tuple(current))
                current = []
            continue
        if "\t" not in line:
            raise CorpusFormatError("expected '<surface>\\t<tag>' (no tab found)", lineno)
        surface, _, tag = line.partition("\t")
        if not surface:
            raise CorpusFormatError("empty surface field", lineno, 1)
        if not tag:
            raise CorpusFormatError("empty tag field", lineno, len(surface) + 2)
        for col, (text, name) in ((1, (surface, "surface")), (len(surface) + 2, (tag, "tag"))):
            bad = next((i for i, c in enumerate(text) if c.isspace()), None)
            if bad is not None:
                raise CorpusFormatError(f"whitespace inside {name} field", lineno, col + bad)
        current.append(TaggedToken(surface, tag))
    if current:
        sequences.append(tuple(current))
    if not sequences:
        raise CorpusFormatError("empty input (no sequences)")
    return TaggedCorpus(tuple(sequences))


def read_tagged_corpus(path: str | Path) -> TaggedCorpus:
    with open(path, encoding="utf-8") as f:
        return parse_tagged_corpus(f)


def format_tagged_corpus(corpus: TaggedCorpus) -> str:
    out = []
    for seq in corpus.sequences:
        out.extend(f"{t.surface}\t{t.tag}\n" for t in seq)
        out.append("\n")
    return "".join(out)


def write_tagged_corpus(corpus: TaggedCorpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_tagged_corpus(corpus))


# --------------------------------------------------------------------------
# lexicon


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        idx = {t: i for i, t in enumerate(self.tokens)}
        if len(idx) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class PosInventory:
    tags: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.tags or self.tags[0] != SPECIAL_TAG:
            raise ValueError(f"inventory must start with {SPECIAL_TAG}")
        idx = {t: i for i, t in enumerate(self.tags)}
        if len(idx) != len(self.tags):
            raise ValueError("duplicate tag in inventory")
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.tags)

    def id(self, tag: str) -> int:
        try:
            return self.index[tag]
        except KeyError:
            raise KeyError(f"unknown POS tag {tag!r}") from None


@dataclass(frozen=True)
class PosPartition:
    """Cells V_rho (sorted token ids per pos id) and POS(x) per token id."""

    members: tuple[np.ndarray, ...]
    tag_sets: tuple[frozenset[int], ...]

    def __post_init__(self):
        for rho, cell in enumerate(self.members):
            cell.setflags(write=False)
            if len(cell) == 0:
                raise ValueError(f"partition cell {rho} is empty")
            if np.any(np.diff(cell) <= 0):
                raise ValueError(f"partition cell {rho} is not sorted/duplicate-free")
        for x, tags in enumerate(self.tag_sets):
            if not tags:
                raise ValueError(f"token {x} belongs to no partition cell")
            for rho in tags:
                if not np.any(self.members[rho] == x):
                    raise ValueError(f"token {x} lists pos {rho} but is not in that cell")
        total = sum(len(c) for c in self.members)
        if total != sum(len(t) for t in self.tag_sets):
            raise ValueError("members and tag_sets disagree")

    @property
    def n_pos(self) -> int:
        return len(self.members)

    @property
    def vocab_size(self) -> int:
        return len(self.tag_sets)

    def contains(self, token: int, pos: int) -> bool:
        return pos in self.tag_sets[token]

    @classmethod
    def from_tag_sets(cls, tag_sets: Sequence[Iterable[int]], n_pos: int) -> "PosPartition":
        cells: list[list[int]] = [[] for _ in range(n_pos)]
        frozen = []
        for x, tags in enumerate(tag_sets):
            tags = frozenset(tags)
            frozen.append(tags)
            for rho in tags:
                cells[rho].append(x)
        return cls(tuple(np.array(c, dtype=np.int64) for c in cells), tuple(frozen))


class Lexicon(NamedTuple):
    vocab: Vocabulary
    inventory: PosInventory
    partition: PosPartition


def build_lexicon(corpus: TaggedCorpus, max_vocab: int = 1 << 30, min_freq: int = 1) -> Lexicon:
    """Rank tokens by frequency (ties lexicographic), keep at most ``max_vocab``
    entries including the four specials, and derive the POS partition."""
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if max_vocab < 4:
        raise ValueError("max_vocab must be >= 4")
    freq: Counter[str] = Counter()
    observed: dict[str, set[str]] = {}
    for seq in corpus.sequences:
        for t in seq:
            freq[t.surface] += 1
            observed.setdefault(t.surface, set()).add(t.tag)
    ranked = sorted((w for w in freq if freq[w] >= min_freq and w not in SPECIAL_TOKENS),
                    key=lambda w: (-freq[w], w))
    kept = ranked[: max_vocab - 4]
    if not kept:
        raise ValueError("corpus is empty after vocabulary filtering")
    vocab = Vocabulary(SPECIAL_TOKENS + tuple(kept))

    used_tags = sorted({tag for w in kept for tag in observed[w]})
    inventory = PosInventory((SPECIAL_TAG,) + tuple(used_tags))
    tag_sets = [{SPECIAL_POS_ID}] * 4 + [{inventory.id(t) for t in observed[w]} for w in kept]
    return Lexicon(vocab, inventory, PosPartition.from_tag_sets(tag_sets, len(inventory)))


def encode_sequence(seq: Sequence[TaggedToken], lexicon: Lexicon) -> tuple[list[int], list[int]]:
    """Token and pos ids for one sequence; OOV tokens become (UNK, SPECIAL).

    A known token seen with a tag outside POS(x) (possible in held-out text)
    takes the lowest pos id of POS(x), so every encoded pair lies in its cell.
    """
    vocab, inventory, tag_sets = lexicon.vocab, lexicon.inventory, lexicon.partition.tag_sets
    toks, tags = [], []
    for t in seq:
        x = vocab.id(t.surface)
        toks.append(x)
        rho = inventory.index.get(t.tag, -1)
        tags.append(rho if rho in tag_sets[x] else min(tag_sets[x]))
    return toks, tags


def encode_corpus(corpus: TaggedCorpus, lexicon: Lexicon) -> list[tuple[list[int], list[int]]]:
    return [encode_sequence(seq, lexicon) for seq in corpus.sequences]


def count_tags(corpus: TaggedCorpus, lexicon: Lexicon) -> dict[int, dict[int, int]]:
    """Per-token tag frequencies observed in ``corpus`` (in-vocabulary only)."""
    counts: dict[int, Counter[int]] = {}
    for toks, tags in encode_corpus(corpus, lexicon):
        for x, rho in zip(toks, tags):
            if x >= 4:
                counts.setdefault(x, Counter())[rho] += 1
    return {x: dict(c) for x, c in counts.items()}


def tag_with_lexicon(partition: PosPartition, unigram_tag_counts: dict[int, dict[int, int]],
                     tokens: Sequence[int]) -> list[int]:
    """Most-frequent-training-tag tagger (ties -> lower pos id); specials and
    UNK get the SPECIAL tag."""
    out = []
    for x in tokens:
        counts = unigram_tag_counts.get(x) if x >= 4 else None
        if not counts:
            if x >= 4:
                # in-vocabulary but unseen in the counts: fall back to POS(x)
                out.append(min(partition.tag_sets[x]))
            else:
                out.append(SPECIAL_POS_ID)
            continue
        out.append(min(counts, key=lambda rho: (-counts[rho], rho)))
    return out


def lexicon_to_json(lexicon: Lexicon, tag_counts: dict[int, dict[int, int]] | None = None) -> str:
    doc = {
        "format": "posglab-lexicon",
        "version": 1,
        "tokens": list(lexicon.vocab.tokens),
        "tags": list(lexicon.inventory.tags),
        "pos_of_token": [sorted(s) for s in lexicon.partition.tag_sets],
        "tag_counts": {str(x): {str(r): c for r, c in sorted(cs.items())}
                       for x, cs in sorted((tag_counts or {}).items())},
    }
    return json.dumps(doc, ensure_ascii=False, indent=1) + "\n"


def lexicon_from_json(text: str) -> tuple[Lexicon, dict[int, dict[int, int]]]:
    doc = json.loads(text)
    if doc.get("format") != "posglab-lexicon":
        raise ValueError("not a posglab lexicon file")
    inventory = PosInventory(tuple(doc["tags"]))
    lexicon = Lexicon(Vocabulary(tuple(doc["tokens"])), inventory,
                      PosPartition.from_tag_sets(doc["pos_of_token"], len(inventory)))
    counts = {int(x): {int(r): c for r, c in cs.items()} for x, cs in doc["tag_counts"].items()}
    return lexicon, counts


# --------------------------------------------------------------------------
# synthetic grammars


@dataclass(frozen=True)
class SyntheticGrammar:
    """Weighted sentence templates over tags plus weighted per-tag lexicons.

    Each generated sequence concatenates between ``sentences[0]`` and
    ``sentences[1]`` template instances.
    """

    templates: tuple[tuple[float, tuple[str, ...]], ...]
    lexicon: dict[str, tuple[tuple[str, float], ...]]
    sentences: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if not self.templates:
            raise ValueError("grammar has no templates")
        for w, tags in self.templates:
            if not w > 0:
                raise ValueError("template weights must be positive")
            if not tags:
                raise ValueError("empty template")
            for tag in tags:
                if not self.lexicon.get(tag):
                    raise ValueError(f"template tag {tag!r} has no lexicon entry")
        for tag, entries in self.lexicon.items():
            for tok, w in entries:
                if not w > 0:
                    raise ValueError(f"lexicon weight for {tok!r}/{tag} must be positive")
                TaggedToken(tok, tag)
        lo, hi = self.sentences
        if not 1 <= lo <= hi:
            raise ValueError("sentences range must satisfy 1 <= min <= max")

    def to_json(self) -> str:
        doc = {
            "sentences": list(self.sentences),
            "templates": [{"weight": w, "tags": list(t)} for w, t in self.templates],
            "lexicon": {tag: [[tok, w] for tok, w in entries] for tag, entries in self.lexicon.items()},
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SyntheticGrammar":
        doc = json.loads(text)
        return cls(
            templates=tuple((float(t["weight"]), tuple(t["tags"])) for t in doc["templates"]),
            lexicon={tag: tuple((tok, float(w)) for tok, w in entries)
                     for tag, entries in doc["lexicon"].items()},
            sentences=tuple(doc.get("sentences", (1, 1))),
        )


def _cdf(weights: Sequence[float]) -> np.ndarray:
    c = np.cumsum(np.asarray(weights, dtype=np.float64))
    return c / c[-1]


def generate_synthetic_corpus(grammar: SyntheticGrammar, n_sequences: int, seed: int) -> TaggedCorpus:
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    t_cdf = _cdf([w for w, _ in grammar.templates])
    lex = {tag: ([tok for tok, _ in entries], _cdf([w for _, w in entries]))
           for tag, entries in grammar.lexicon.items()}
    lo, hi = grammar.sentences
    sequences = []
    for _ in range(n_sequences):
        seq = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            tags = grammar.templates[int(np.searchsorted(t_cdf, rng.random(), side="right"))][1]
            for tag in tags:
                toks, cdf = lex[tag]
                seq.append(TaggedToken(toks[int(np.searchsorted(cdf, rng.random(), side="right"))], tag))
        sequences.append(tuple(seq))
    return TaggedCorpus(tuple(sequences))


_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "kl", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")


def _pseudo_words(n: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(int(rng.integers(1, 4))))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


# (tag, lexicon size)
_DESK_TAGS = (("DT", 6), ("JJ", 250), ("NN", 480), ("NNS", 300), ("VBD", 200), ("VBZ", 150),
              ("RB", 60), ("IN", 20), ("PRP", 8), ("CC", 3), (".", 1))
_DESK_TEMPLATES = (
    (6.0, "DT JJ NN VBD DT NN ."),
    (5.0, "PRP VBD DT JJ NNS IN DT NN ."),
    (4.0, "DT NNS VBD RB ."),
    (4.0, "DT NN VBZ JJ ."),
    (3.0, "PRP VBZ DT NN CC PRP VBD RB ."),
    (3.0, "DT JJ JJ NN VBD IN DT JJ NN ."),
    (3.0, "NNS VBD IN PRP ."),
    (3.0, "DT NN IN DT NN VBZ RB JJ ."),
    (2.0, "PRP RB VBD NNS CC NNS ."),
    (2.0, "DT NN VBD DT NN IN NNS ."),
    (2.0, "JJ NNS VBD DT JJ NN ."),
    (1.0, "IN DT NN PRP VBD ."),
)


def desk_grammar(seed: int = 0, n_ambiguous: int = 20) -> SyntheticGrammar:
    """The bundled desk-scale grammar: 11 tags, ~1480 pseudo-words with Zipf
    weights, and ``n_ambiguous`` words shared between NN and VBD."""
    rng = np.random.default_rng(seed)
    taken: set[str] = {"."}
    lexicon: dict[str, tuple[tuple[str, float], ...]] = {}
    for tag, size in _DESK_TAGS:
        words = ["."] if tag == "." else _pseudo_words(size, rng, taken)
        lexicon[tag] = tuple((w, 1.0 / (r + 1)) for r, w in enumerate(words))
    shared = [w for w, _ in lexicon["NN"][:: max(1, len(lexicon["NN"]) // max(n_ambiguous, 1))]][:n_ambiguous]
    vbd = list(lexicon["VBD"])
    for i, w in enumerate(shared):
        vbd.insert(2 * i + 1, (w, 0.0))
    # re-weight so shared words sit at interleaved Zipf ranks
    lexicon["VBD"] = tuple((w, 1.0 / (r + 1)) for r, (w, _) in enumerate(vbd))
    templates = tuple((w, tuple(t.split())) for w, t in _DESK_TEMPLATES)
    return SyntheticGrammar(templates, lexicon, sentences=(7, 12))
