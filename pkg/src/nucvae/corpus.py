"""Statement datasets: preprocessing, synthetic generation, and JSONL io.

A statement is a short tokenized sentence carrying binary negation and
uncertainty labels plus a provenance tag (gold / weak / synthetic). This
module owns the tokenization contract (lowercase, contractions split, then
whitespace), the statement-splitting and label-binarization steps used to
ingest cue-annotated review corpora, the synthetic grammar used for
desk-scale experiments, and the JSONL serialization schema:

    {"id": ..., "tokens": [...], "negation": 0|1, "uncertainty": 0|1,
     "source": "gold"|"weak"|"synthetic"}
"""

import hashlib
import json
import re
from dataclasses import dataclass

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
MAX_LENGTH = 15
LABEL_SOURCES = ("gold", "weak", "synthetic")
FACTORS = ("negation", "uncertainty")


class ParseError(ValueError):
    """A record could not be parsed; message names the offending line."""


class SchemaError(ValueError):
    """A parsed record violates the dataset schema."""


@dataclass(frozen=True)
class Statement:
    id: str
    tokens: tuple
    negation: int
    uncertainty: int
    label_source: str

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError(f"statement {self.id!r} has no tokens")
        for label in (self.negation, self.uncertainty):
            if label not in (0, 1):
                raise ValueError(f"statement {self.id!r}: labels must be 0 or 1")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(
                f"statement {self.id!r}: unknown label source {self.label_source!r}"
            )

    def label(self, factor):
        return self.negation if factor == "negation" else self.uncertainty


@dataclass
class DatasetSplit:
    name: str
    statements: list


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

_CONTRACTION_SUFFIXES = ("n't", "'s", "'re", "'ve", "'ll", "'d", "'m")


def split_contractions(word):
    for suffix in _CONTRACTION_SUFFIXES:
        if word.endswith(suffix) and len(word) > len(suffix):
            return [word[: -len(suffix)], suffix]
    return [word]


def tokenize(text):
    """Lowercase, detach contraction suffixes, split on whitespace."""
    out = []
    for word in text.lower().split():
        out.extend(split_contractions(word))
    return out


def normalize_tokens(tokens):
    out = []
    for tok in tokens:
        for word in tok.lower().split():
            out.extend(split_contractions(word))
    return out


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def split_multi_statement(tokens, conjunction_positions):
    """Split a token list at conjunction positions into cue-free segments.

    Segments are maximal runs between conjunction tokens, in order, with
    empty segments dropped. Joining the segments back with the conjunction
    tokens at the recorded positions reproduces the input.
    """
    tokens = list(tokens)
    for pos in conjunction_positions:
        if not 0 <= pos < len(tokens):
            raise ValueError(
                f"conjunction position {pos} out of range for {len(tokens)} tokens"
            )
    cut = sorted(set(conjunction_positions))
    segments = []
    start = 0
    for pos in cut:
        if pos > start:
            segments.append(tokens[start:pos])
        start = pos + 1
    if start < len(tokens):
        segments.append(tokens[start:])
    return segments


def segment_bounds(tokens, conjunction_positions):
    """(start, end) index pairs of the segments split_multi_statement returns."""
    cut = sorted(set(conjunction_positions))
    bounds = []
    start = 0
    for pos in cut:
        if pos > start:
            bounds.append((start, pos))
        start = pos + 1
    if start < len(tokens):
        bounds.append((start, len(tokens)))
    return bounds


def binarize_labels(n_tokens, spans_by_factor):
    """Collapse cue-scope span annotations to statement-level binary labels.

    spans_by_factor maps "negation"/"uncertainty" to a list of (start, end)
    token spans (end-exclusive). A factor's label is 1 iff it has at least
    one cue span inside the statement; any multi-level certainty scheme is
    assumed already collapsed to presence/absence of uncertainty spans.
    """
    labels = {}
    for factor in FACTORS:
        spans = spans_by_factor.get(factor, [])
        for start, end in spans:
            if not (0 <= start < end <= n_tokens):
                raise ValueError(
                    f"{factor} span ({start}, {end}) outside statement of "
                    f"length {n_tokens}"
                )
        labels[factor] = 1 if spans else 0
    return labels["negation"], labels["uncertainty"]


def filter_by_length(statements, max_length=MAX_LENGTH):
    """Drop statements longer than max_length tokens; order preserved."""
    return [s for s in statements if len(s.tokens) <= max_length]


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token/index bijection with fixed reserved indices 0-3."""

    def __init__(self, tokens):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def encode(self, tokens):
        return [self.index.get(tok, UNK) for tok in tokens]

    def decode(self, ids, keep_reserved=False):
        toks = [self.tokens[i] for i in ids]
        if keep_reserved:
            return toks
        return [t for t in toks if t not in RESERVED_TOKENS]


def build_vocabulary(statements, min_frequency=1):
    """Vocabulary over tokens with corpus frequency >= min_frequency.

    Indices are assigned by descending frequency, ties broken
    lexicographically, after the four reserved tokens.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts = {}
    for stmt in statements:
        for tok in stmt.tokens:
            counts[tok] = counts.get(tok, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_frequency]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED_TOKENS) + kept)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_SLOT_RE = re.compile(r"^\{(subject|verb|object|adverb)\}$")


@dataclass
class SyntheticGrammar:
    """Template grammar whose labels are exactly determined by cue presence.

    Templates are token lists; "{subject}" etc. are lexicon slots and the
    markers "{neg?}" / "{unc?}" mark where a cue token is inserted when the
    corresponding factor is drawn active (the marker disappears otherwise).
    """

    subjects: list
    verbs: list
    objects: list
    adverbs: list
    negation_cues: list
    uncertainty_cues: list
    templates: list
    negation_rate: float = 0.25
    uncertainty_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        cues = set(self.negation_cues) | set(self.uncertainty_cues)
        if set(self.negation_cues) & set(self.uncertainty_cues):
            raise ValueError("negation and uncertainty cue sets overlap")
        lexicon = set(self.subjects + self.verbs + self.objects + self.adverbs)
        lexicon |= {
            tok
            for tpl in self.templates
            for tok in tpl
            if not tok.startswith("{")
        }
        if cues & lexicon:
            raise ValueError(f"cue tokens also appear as plain lexicon: {cues & lexicon}")

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.__dict__, fh, indent=2)
            fh.write("\n")

    def lexicon_for(self, slot):
        return {
            "subject": self.subjects,
            "verb": self.verbs,
            "object": self.objects,
            "adverb": self.adverbs,
        }[slot]

    def all_tokens(self):
        toks = set(self.negation_cues) | set(self.uncertainty_cues)
        toks |= set(self.subjects + self.verbs + self.objects + self.adverbs)
        for tpl in self.templates:
            toks |= {t for t in tpl if not t.startswith("{")}
        return toks


def _realize(grammar, rng, negated, uncertain):
    template = grammar.templates[rng.integers(len(grammar.templates))]
    out = []
    for tok in template:
        m = _SLOT_RE.match(tok)
        if m:
            lexicon = grammar.lexicon_for(m.group(1))
            out.append(lexicon[rng.integers(len(lexicon))])
        elif tok == "{neg?}":
            if negated:
                out.append(grammar.negation_cues[rng.integers(len(grammar.negation_cues))])
        elif tok == "{unc?}":
            if uncertain:
                out.append(
                    grammar.uncertainty_cues[rng.integers(len(grammar.uncertainty_cues))]
                )
        else:
            out.append(tok)
    return out


def generate_synthetic_corpus(grammar, n, fractions=(0.8, 0.1, 0.1)):
    """Generate n labeled statements and partition them into train/dev/test.

    Deterministic given grammar.seed; labels are 1 exactly when a cue of
    the factor was inserted, and observed class rates converge on the
    grammar's balance targets.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(grammar.seed)
    statements = []
    for i in range(n):
        negated = int(rng.random() < grammar.negation_rate)
        uncertain = int(rng.random() < grammar.uncertainty_rate)
        tokens = _realize(grammar, rng, negated, uncertain)
        statements.append(
            Statement(
                id=f"syn-{i:07d}",
                tokens=tuple(tokens),
                negation=negated,
                uncertainty=uncertain,
                label_source="synthetic",
            )
        )
    n_train = int(round(n * fractions[0]))
    n_dev = int(round(n * fractions[1]))
    return {
        "train": DatasetSplit("train", statements[:n_train]),
        "dev": DatasetSplit("dev", statements[n_train : n_train + n_dev]),
        "test": DatasetSplit("test", statements[n_train + n_dev :]),
    }


def cue_presence_labels(tokens, grammar):
    """Labels implied by scanning tokens against the grammar's cue sets."""
    toks = set(tokens)
    return (
        int(bool(toks & set(grammar.negation_cues))),
        int(bool(toks & set(grammar.uncertainty_cues))),
    )


# ---------------------------------------------------------------------------
# gold-corpus ingestion
# ---------------------------------------------------------------------------

def prepare_gold_records(records, max_length=MAX_LENGTH, fractions=(0.8, 0.1, 0.1)):
    """Turn cue-annotated sentence records into filtered gold statements.

    Each record carries raw "tokens", per-factor cue span lists
    ("negation_spans", "uncertainty_spans", end-exclusive, indices into
    the raw tokens), optional "conjunctions" token positions, and an
    optional "split" name. Sentences are split at conjunctions, each
    segment gets statement-level binary labels from the spans overlapping
    it, tokens are normalized, and segments longer than max_length are
    dropped. Records without a "split" are assigned one by id hash.
    """
    splits = {"train": [], "dev": [], "test": []}
    for rec in records:
        tokens = rec["tokens"]
        spans = {
            "negation": [tuple(s) for s in rec.get("negation_spans", [])],
            "uncertainty": [tuple(s) for s in rec.get("uncertainty_spans", [])],
        }
        binarize_labels(len(tokens), spans)  # validate spans up front
        conj = rec.get("conjunctions", [])
        bounds = segment_bounds(tokens, conj)
        for seg_i, (start, end) in enumerate(bounds):
            seg_spans = {
                factor: [
                    (max(s, start) - start, min(e, end) - start)
                    for (s, e) in spans[factor]
                    if s < end and e > start
                ]
                for factor in FACTORS
            }
            neg, unc = binarize_labels(end - start, seg_spans)
            seg_tokens = normalize_tokens(tokens[start:end])
            if not seg_tokens or len(seg_tokens) > max_length:
                continue
            sid = f"{rec['id']}.{seg_i}" if len(bounds) > 1 else str(rec["id"])
            stmt = Statement(
                id=sid,
                tokens=tuple(seg_tokens),
                negation=neg,
                uncertainty=unc,
                label_source="gold",
            )
            name = rec.get("split") or _hash_split(sid, fractions)
            if name not in splits:
                raise SchemaError(f"record {rec['id']!r}: unknown split {name!r}")
            splits[name].append(stmt)
    return {name: DatasetSplit(name, stmts) for name, stmts in splits.items()}


def _hash_split(sid, fractions):
    digest = hashlib.sha256(sid.encode("utf-8")).digest()
    x = int.from_bytes(digest[:8], "big") / 2**64
    if x < fractions[0]:
        return "train"
    if x < fractions[0] + fractions[1]:
        return "dev"
    return "test"


# ---------------------------------------------------------------------------
# JSONL io
# ---------------------------------------------------------------------------

_REQUIRED_FIELDS = ("id", "tokens", "negation", "uncertainty", "source")


def save_jsonl(split, path):
    with open(path, "w", encoding="utf-8") as fh:
        for stmt in split.statements:
            rec = {
                "id": stmt.id,
                "tokens": list(stmt.tokens),
                "negation": stmt.negation,
                "uncertainty": stmt.uncertainty,
                "source": stmt.label_source,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_jsonl(path, name="data"):
    statements = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: malformed JSON record: {err}") from err
            for key in _REQUIRED_FIELDS:
                if key not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing required field {key!r}")
            if rec["negation"] not in (0, 1) or rec["uncertainty"] not in (0, 1):
                raise SchemaError(f"{path}:{lineno}: labels must be 0 or 1")
            if not isinstance(rec["tokens"], list) or not rec["tokens"]:
                raise SchemaError(f"{path}:{lineno}: tokens must be a non-empty list")
            if rec["source"] not in LABEL_SOURCES:
                raise SchemaError(f"{path}:{lineno}: unknown source {rec['source']!r}")
            statements.append(
                Statement(
                    id=str(rec["id"]),
                    tokens=tuple(str(t) for t in rec["tokens"]),
                    negation=int(rec["negation"]),
                    uncertainty=int(rec["uncertainty"]),
                    label_source=rec["source"],
                )
            )
    return DatasetSplit(name, statements)


def save_splits(splits, out_dir):
    for name, split in splits.items():
        save_jsonl(split, f"{out_dir}/{name}.jsonl")


def load_splits(data_dir, names=("train", "dev", "test")):
    return {name: load_jsonl(f"{data_dir}/{name}.jsonl", name) for name in names}


def dataset_fingerprint(splits):
    """sha256 over the canonical serialization of all splits, for report guards."""
    h = hashlib.sha256()
    for name in sorted(splits):
        h.update(name.encode("utf-8"))
        for stmt in splits[name].statements:
            rec = [stmt.id, list(stmt.tokens), stmt.negation, stmt.uncertainty,
                   stmt.label_source]
            h.update(json.dumps(rec, ensure_ascii=False).encode("utf-8"))
    return h.hexdigest()
