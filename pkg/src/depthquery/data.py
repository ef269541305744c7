"""Synthetic corpus generation, JSONL ingestion, tokenization, statistics.

Sentences are whitespace-tokenized and lowercase. Generated sentences are
built from clause templates whose gold labels are correct by construction:
a clause's label is its predicate's lexicon polarity, flipped by a negator,
and conflict sentences are guaranteed to carry at least one positive and one
negative aspect. Distractor clauses add sentiment words that belong to no
queried aspect, so uniform pooling over tokens is genuinely lossy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, InputError
from .readout import LABELS, AspectQuery

PHENOMENA = ("plain", "negation", "contrast", "conflict")


@dataclass
class Sentence:
    id: str
    text: str
    tokens: list[str]
    aspects: list[AspectQuery]

    def __post_init__(self):
        for q in self.aspects:
            i, j = q.span
            if j > len(self.tokens):
                raise InputError(f"aspect span {q.span} outside sentence '{self.id}'")
            if q.term and q.term != " ".join(self.tokens[i - 1:j]):
                raise InputError(
                    f"aspect term '{q.term}' does not match tokens at {q.span} in '{self.id}'")


Corpus = list[Sentence]


@dataclass
class Lexicons:
    aspect_nouns: list[str] = field(default_factory=lambda: [
        "food", "service", "staff", "pizza", "pasta", "sushi", "coffee",
        "wine", "menu", "atmosphere", "decor", "music", "seating", "dessert",
        "bread", "laptop", "screen", "keyboard", "camera", "portions",
        "battery life", "wine list", "front desk", "noise level",
    ])
    positive: list[str] = field(default_factory=lambda: [
        "excellent", "great", "amazing", "wonderful", "fantastic",
        "delicious", "friendly", "perfect", "superb", "tasty", "lovely",
        "outstanding", "brilliant", "pleasant", "impressive", "generous",
    ])
    negative: list[str] = field(default_factory=lambda: [
        "terrible", "awful", "horrible", "bland", "rude", "disappointing",
        "overpriced", "slow", "stale", "noisy", "cramped", "dirty",
        "broken", "mediocre", "greasy", "cold",
    ])
    neutral: list[str] = field(default_factory=lambda: [
        "okay", "average", "ordinary", "standard", "typical", "acceptable",
        "unremarkable", "regular", "plain", "usual",
    ])
    negators: list[str] = field(default_factory=lambda: ["not", "never"])
    intensifiers: list[str] = field(default_factory=lambda: [
        "really", "quite", "very", "honestly", "genuinely",
    ])
    openers: list[list[str]] = field(default_factory=lambda: [
        ["honestly", ","], ["overall", ","], ["to", "be", "fair", ","],
        ["in", "the", "end", ","], ["then", "again", ","],
    ])
    copulas: list[str] = field(default_factory=lambda: ["is", "was", "seemed", "felt"])

    def polarity_of(self, predicate: str) -> str:
        if predicate in self.positive:
            return "positive"
        if predicate in self.negative:
            return "negative"
        if predicate in self.neutral:
            return "neutral"
        raise InputError(f"predicate '{predicate}' is in no polarity lexicon")


# clause skeletons appended with no aspect annotation; they carry polarity
# words that must be ignored by a correct reader
DISTRACTOR_SKELETONS = [
    ["though", "the", "place", "next", "door", "seemed", "{pred}"],
    ["while", "everyone", "nearby", "called", "theirs", "{pred}"],
    ["even", "though", "reviews", "elsewhere", "sounded", "{pred}"],
    ["and", "the", "crowd", "outside", "looked", "{pred}"],
]

FLIP = {"positive": "negative", "negative": "positive", "neutral": "neutral"}


@dataclass
class GenSpec:
    n_sentences: int = 1000
    m_dist: dict = field(default_factory=lambda: {1: 0.45, 2: 0.35, 3: 0.20})
    mix: dict = field(default_factory=lambda: {
        "plain": 0.35, "negation": 0.30, "contrast": 0.15, "conflict": 0.20})
    class_probs: tuple = (0.38, 0.24, 0.38)  # positive, neutral, negative
    distractor_rate: float = 0.35
    opener_rate: float = 0.4
    seed: int = 0
    lexicons: Lexicons = field(default_factory=Lexicons)

    def __post_init__(self):
        if self.n_sentences < 1:
            raise ConfigError("n_sentences must be positive")
        if abs(sum(self.m_dist.values()) - 1.0) > 1e-9:
            raise ConfigError(f"aspect-count probabilities sum to {sum(self.m_dist.values())}")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"phenomenon probabilities sum to {sum(self.mix.values())}")
        unknown = set(self.mix) - set(PHENOMENA)
        if unknown:
            raise ConfigError(f"unknown phenomena {sorted(unknown)}")
        multi_mass = sum(p for m, p in self.m_dist.items() if m >= 2)
        needs_multi = self.mix.get("contrast", 0) + self.mix.get("conflict", 0)
        if needs_multi > 0 and multi_mass == 0:
            raise ConfigError("contrast/conflict sentences need aspect counts >= 2")
        if not (self.lexicons.aspect_nouns and self.lexicons.positive
                and self.lexicons.negative and self.lexicons.neutral):
            raise ConfigError("lexicons must be nonempty")


def _choice(rng, items, p=None):
    return items[rng.choice(len(items), p=p)]


def _sample_m(rng, m_dist: dict, minimum: int = 1) -> int:
    pairs = [(m, p) for m, p in sorted(m_dist.items()) if m >= minimum and p > 0]
    total = sum(p for _, p in pairs)
    ms = [m for m, _ in pairs]
    ps = [p / total for _, p in pairs]
    return int(ms[rng.choice(len(ms), p=ps)])


def _predicate_for(rng, lex: Lexicons, label: str) -> str:
    pool = {"positive": lex.positive, "neutral": lex.neutral,
            "negative": lex.negative}[label]
    return _choice(rng, pool)


def _clause(rng, lex: Lexicons, noun: str, label: str, negated: bool) -> tuple[list, int, int]:
    """Build clause tokens; returns (tokens, span_start, span_end) 0-based in-clause."""
    noun_tokens = noun.split()
    tokens = ["the"] + noun_tokens
    start = 1
    end = start + len(noun_tokens) - 1
    tokens.append(_choice(rng, lex.copulas))
    if rng.random() < 0.35:
        tokens.append(_choice(rng, lex.intensifiers))
    surface_label = FLIP[label] if negated else label
    if negated:
        tokens.append(_choice(rng, lex.negators))
    tokens.append(_predicate_for(rng, lex, surface_label))
    return tokens, start, end


def _assemble(rng, spec: GenSpec, sentence_id: str, phenomenon: str) -> Sentence:
    lex = spec.lexicons
    minimum = 2 if phenomenon in ("contrast", "conflict") else 1
    m = _sample_m(rng, spec.m_dist, minimum)
    nouns = [lex.aspect_nouns[i]
             for i in rng.choice(len(lex.aspect_nouns), size=m, replace=False)]

    labels = [LABELS[rng.choice(3, p=spec.class_probs)] for _ in range(m)]
    negated = [False] * m
    if phenomenon == "negation":
        negated = [rng.random() < 0.35 for _ in range(m)]
        negated[int(rng.choice(m))] = True
    elif phenomenon in ("contrast", "conflict"):
        first_pos = bool(rng.random() < 0.5)
        labels[0] = "positive" if first_pos else "negative"
        labels[1] = "negative" if first_pos else "positive"

    tokens: list[str] = []
    if rng.random() < spec.opener_rate:
        tokens.extend(_choice(rng, lex.openers))
    aspects: list[AspectQuery] = []
    for idx in range(m):
        if idx > 0:
            if phenomenon == "contrast" and idx == 1:
                tokens.append("but")
            elif idx == m - 1:
                tokens.append(_choice(rng, [",", "and", "but"]))
            else:
                tokens.append(",")
        clause, rel_start, rel_end = _clause(rng, lex, nouns[idx], labels[idx], negated[idx])
        offset = len(tokens)
        tokens.extend(clause)
        aspects.append(AspectQuery(span=(offset + rel_start + 1, offset + rel_end + 1),
                                   label=labels[idx], term=nouns[idx]))
    if rng.random() < spec.distractor_rate:
        skeleton = _choice(rng, DISTRACTOR_SKELETONS)
        pred = _choice(rng, lex.positive + lex.negative)
        tokens.extend(t.format(pred=pred) for t in skeleton)
    return Sentence(id=sentence_id, text=" ".join(tokens), tokens=tokens, aspects=aspects)


def generate(spec: GenSpec) -> Corpus:
    """Deterministic template corpus; one derived RNG stream per sentence."""
    names = sorted(spec.mix)
    probs = [spec.mix[k] for k in names]
    corpus = []
    for i in range(spec.n_sentences):
        rng = np.random.default_rng([spec.seed, i])
        phenomenon = names[rng.choice(len(names), p=probs)]
        corpus.append(_assemble(rng, spec, f"s{i:05d}", phenomenon))
    return corpus


# ---------------------------------------------------------------------------
# JSONL interchange


def export_jsonl(corpus: Corpus, path: str) -> None:
    with open(path, "w") as fh:
        for s in corpus:
            starts = []
            pos = 0
            for tok in s.tokens:
                starts.append(pos)
                pos += len(tok) + 1
            record = {
                "id": s.id,
                "text": s.text,
                "aspects": [
                    {
                        "from_char": starts[q.span[0] - 1],
                        "to_char": starts[q.span[1] - 1] + len(s.tokens[q.span[1] - 1]),
                        "term": " ".join(s.tokens[q.span[0] - 1:q.span[1]]),
                        "label": q.label,
                    }
                    for q in s.aspects
                ],
            }
            fh.write(json.dumps(record) + "\n")


def _token_offsets(text: str) -> list[tuple[int, int, str]]:
    """(start, end, token) for whitespace tokens of the raw text."""
    out = []
    pos = 0
    for raw in text.split():
        start = text.index(raw, pos)
        out.append((start, start + len(raw), raw))
        pos = start + len(raw)
    return out


def ingest_jsonl(path: str) -> tuple[Corpus, list[dict]]:
    """Load a JSONL corpus, aligning character spans to token intervals.

    An aspect whose characters do not fall on token boundaries is snapped
    outward to the covering tokens, recording a warning. Returns the corpus
    and the warning records.
    """
    corpus: Corpus = []
    warnings: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            try:
                text = record["text"]
                sid = str(record.get("id", f"line{lineno}"))
                raw_aspects = record["aspects"]
            except KeyError as exc:
                raise InputError(f"line {lineno}: missing field {exc}") from exc
            offsets = _token_offsets(text)
            tokens = [tok.lower() for _, _, tok in offsets]
            aspects = []
            for a in raw_aspects:
                label = a.get("label")
                if label not in LABELS:
                    raise InputError(f"line {lineno}: label '{label}' not in {LABELS}")
                lo, hi = int(a["from_char"]), int(a["to_char"])
                covering = [k for k, (s, e, _) in enumerate(offsets) if s < hi and e > lo]
                if not covering:
                    raise InputError(f"line {lineno}: aspect chars [{lo},{hi}) match no token")
                first, last = covering[0], covering[-1]
                if offsets[first][0] != lo or offsets[last][1] != hi:
                    warnings.append({
                        "line": lineno, "id": sid, "term": a.get("term", ""),
                        "snapped_to": [first + 1, last + 1],
                        "reason": "span not on token boundaries; snapped outward",
                    })
                aspects.append(AspectQuery(span=(first + 1, last + 1), label=label,
                                           term=" ".join(tokens[first:last + 1])))
            corpus.append(Sentence(id=sid, text=text, tokens=tokens, aspects=aspects))
    return corpus, warnings


# ---------------------------------------------------------------------------
# statistics and vocabulary


@dataclass
class CorpusStats:
    avg_m: float
    p_m1: float
    p_m2: float
    p_m_gt2: float
    p_m_gt1: float
    class_counts: dict
    n_sentences: int
    n_aspects: int

    def to_dict(self) -> dict:
        return asdict(self)


def stats(corpus: Corpus) -> CorpusStats:
    if not corpus:
        raise InputError("cannot compute statistics of an empty corpus")
    counts = np.array([len(s.aspects) for s in corpus])
    class_counts = {label: 0 for label in LABELS}
    for s in corpus:
        for q in s.aspects:
            class_counts[q.label] += 1
    n = len(corpus)
    return CorpusStats(
        avg_m=float(counts.mean()),
        p_m1=float((counts == 1).sum() / n),
        p_m2=float((counts == 2).sum() / n),
        p_m_gt2=float((counts > 2).sum() / n),
        p_m_gt1=float((counts > 1).sum() / n),
        class_counts=class_counts,
        n_sentences=n,
        n_aspects=int(counts.sum()),
    )


class Vocab:
    """Corpus-derived token ids with reserved unknown (0) and pad (1)."""

    UNK = 0
    PAD = 1

    def __init__(self, token_to_id: dict[str, int]):
        self.token_to_id = token_to_id

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "Vocab":
        tokens = sorted({tok for s in corpus for tok in s.tokens})
        return cls({tok: i + 2 for i, tok in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.token_to_id) + 2

    def encode(self, tokens: list[str]) -> np.ndarray:
        return np.array([self.token_to_id.get(t, self.UNK) for t in tokens],
                        dtype=np.int64)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.token_to_id, fh, indent=0, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path) as fh:
            return cls(json.load(fh))


def manifest_for(spec: GenSpec) -> dict:
    data = asdict(spec)
    data["m_dist"] = {str(k): v for k, v in spec.m_dist.items()}
    return data
