"""Synthetic attributed sequence corpus with a rule-based oracle labeler.

Sequences are drawn from a probabilistic template grammar: an attribute
assignment is sampled first, then tokens are laid out in a canonical slot
order (formality marker, tense marker, polarity words, keywords, neutral
filler). The oracle labeler inverts this by counting class-tagged tokens,
so labels are always recomputable from the token ids alone.

Labels: polarity in {pos, neg} by majority of polarity-tagged tokens with
ties going to neg; tense in {past, present, future} by marker presence
(no marker, or conflicting markers, means present); formality in
{formal, informal} by formality-marker presence; keywords by membership.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Vocabulary",
    "TokenSequence",
    "CorpusSplit",
    "CorpusConfig",
    "build_vocabulary",
    "generate_corpus",
    "oracle_label",
    "save_corpus",
    "load_corpus",
    "save_vocabulary",
    "load_vocabulary",
    "CorpusFormatError",
    "ATTRIBUTES",
]

BOS, EOS, PAD = 0, 1, 2

# attribute name -> ordered class labels (class index = position)
ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "polarity": ("neg", "pos"),
    "tense": ("past", "present", "future"),
    "formality": ("informal", "formal"),
}


class CorpusFormatError(ValueError):
    """Malformed corpus or vocabulary file; message carries the line number."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense-id token inventory with one class tag per token."""

    tokens: tuple[str, ...]
    class_map: dict[str, str]  # token -> class tag

    def __post_init__(self):
        if self.tokens[:3] != ("<bos>", "<eos>", "<pad>"):
            raise ValueError("reserved tokens must be <bos>, <eos>, <pad> at ids 0, 1, 2")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.tokens.index(token)

    def ids_with_class(self, tag: str) -> list[int]:
        return [i for i, tok in enumerate(self.tokens) if self.class_map.get(tok) == tag]


@dataclass(frozen=True)
class TokenSequence:
    """BOS-initiated, EOS-terminated token id sequence plus oracle labels."""

    ids: tuple[int, ...]
    labels: dict[str, object]  # attribute -> label; 'keywords' -> sorted tuple of ids

    def __post_init__(self):
        if not self.ids or self.ids[0] != BOS:
            raise ValueError("sequence must start with BOS")
        if EOS not in self.ids:
            raise ValueError("sequence must contain EOS")
        eos_pos = self.ids.index(EOS)
        if any(t == BOS for t in self.ids[1:]):
            raise ValueError("sequence must contain exactly one BOS")
        if any(t == PAD for t in self.ids[:eos_pos]):
            raise ValueError("PAD before EOS")
        if any(t != PAD for t in self.ids[eos_pos + 1 :]):
            raise ValueError("only PAD allowed after EOS")

    def body(self) -> tuple[int, ...]:
        """Token ids strictly between BOS and EOS."""
        return self.ids[1 : self.ids.index(EOS)]


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 120
    max_len: int = 16  # includes BOS and EOS
    n_train: int = 20000
    n_dev: int = 1000
    n_test: int = 1000
    n_labeled_per_class: int = 200
    n_keywords: int = 8

    def __post_init__(self):
        if self.vocab_size < 40:
            raise ValueError(f"vocab_size {self.vocab_size} too small for the template grammar")
        if self.max_len < 8:
            raise ValueError(f"max_len {self.max_len} too small for the template grammar")


@dataclass
class CorpusSplit:
    vocab: Vocabulary
    train: list[TokenSequence]
    dev: list[TokenSequence]
    test: list[TokenSequence]
    # attribute -> class label -> list of train indices (exactly n_labeled per class)
    labeled_subset: dict[str, dict[str, list[int]]] = field(default_factory=dict)

    def split(self, name: str) -> list[TokenSequence]:
        try:
            return {"train": self.train, "dev": self.dev, "test": self.test}[name]
        except KeyError:
            raise KeyError(f"unknown split {name!r}; expected train/dev/test") from None


def build_vocabulary(config: CorpusConfig = CorpusConfig()) -> Vocabulary:
    """Fixed-layout vocabulary: reserved, polarity, tense, formality,
    keywords, then neutral filler up to vocab_size."""
    tokens: list[str] = ["<bos>", "<eos>", "<pad>"]
    class_map: dict[str, str] = {}

    def block(prefix: str, n: int, tag: str):
        for i in range(n):
            tok = f"{prefix}{i}"
            tokens.append(tok)
            class_map[tok] = tag

    block("good", 10, "pos")
    block("bad", 10, "neg")
    block("did", 3, "past")
    block("now", 3, "present")
    block("will", 3, "future")
    block("sir", 4, "formal")
    block("topic", config.n_keywords, "keyword")
    n_neutral = config.vocab_size - len(tokens)
    if n_neutral < 8:
        raise ValueError(f"vocab_size {config.vocab_size} leaves only {n_neutral} neutral tokens")
    block("thing", n_neutral, "neutral")
    return Vocabulary(tokens=tuple(tokens), class_map=class_map)


def oracle_label(vocab: Vocabulary, ids) -> dict[str, object]:
    """Deterministic labels from token ids alone. Total function: any body
    content maps to some label for every attribute."""
    body = list(ids)
    if body and body[0] == BOS:
        eos = body.index(EOS) if EOS in body else len(body)
        body = body[1:eos]
    counts = {"pos": 0, "neg": 0, "past": 0, "present": 0, "future": 0, "formal": 0}
    keywords: list[int] = []
    for tid in body:
        tag = vocab.class_map.get(vocab.tokens[tid], "neutral")
        if tag in counts:
            counts[tag] += 1
        elif tag == "keyword":
            keywords.append(tid)
    polarity = "pos" if counts["pos"] > counts["neg"] else "neg"
    if counts["past"] > 0 and counts["future"] == 0:
        tense = "past"
    elif counts["future"] > 0 and counts["past"] == 0:
        tense = "future"
    else:
        tense = "present"
    formality = "formal" if counts["formal"] > 0 else "informal"
    return {
        "polarity": polarity,
        "tense": tense,
        "formality": formality,
        "keywords": tuple(sorted(set(keywords))),
    }


def _sample_sequence(rng: np.random.Generator, vocab: Vocabulary, config: CorpusConfig) -> TokenSequence:
    """Draw an attribute assignment, then emit tokens in canonical slot order."""
    pos_ids = vocab.ids_with_class("pos")
    neg_ids = vocab.ids_with_class("neg")
    tense_ids = {t: vocab.ids_with_class(t) for t in ("past", "future")}
    formal_ids = vocab.ids_with_class("formal")
    keyword_ids = vocab.ids_with_class("keyword")
    neutral_ids = vocab.ids_with_class("neutral")

    formality = rng.random() < 0.5
    tense = rng.choice(["past", "present", "future"])
    polarity = rng.random() < 0.5
    n_keywords = int(rng.choice([0, 1, 2], p=[0.5, 0.3, 0.2]))

    body: list[int] = []
    if formality:
        body.append(int(rng.choice(formal_ids)))
    if tense != "present":
        body.append(int(rng.choice(tense_ids[tense])))
    # majority rule honored by construction: 1-2 words of the chosen class only
    n_pol = int(rng.integers(1, 3))
    pool = pos_ids if polarity else neg_ids
    # multi-token slots are emitted in ascending id order so a sequence is a
    # deterministic function of its token bag (keeps the decoder's job easy)
    body.extend(sorted(int(x) for x in rng.choice(pool, size=n_pol, replace=False)))
    if n_keywords:
        body.extend(sorted(int(x) for x in rng.choice(keyword_ids, size=n_keywords, replace=False)))
    # neutral filler: contiguous ascending run (cyclic) from the neutral pool,
    # so the bag of tokens determines the sequence and stays learnable
    budget = config.max_len - 2 - len(body)
    n_fill = 0 if budget <= 0 else int(rng.integers(min(2, budget), budget + 1))
    start = int(rng.integers(0, len(neutral_ids)))
    body.extend(neutral_ids[(start + k) % len(neutral_ids)] for k in range(n_fill))

    ids = (BOS, *body, EOS)
    return TokenSequence(ids=ids, labels=oracle_label(vocab, ids))


def generate_corpus(seed: int, config: CorpusConfig = CorpusConfig()) -> CorpusSplit:
    """Deterministic corpus from a single seed; splits are disjoint draws."""
    vocab = build_vocabulary(config)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    sizes = {"train": config.n_train, "dev": config.n_dev, "test": config.n_test}
    splits = {
        name: [_sample_sequence(rng, vocab, config) for _ in range(n)]
        for name, n in sizes.items()
    }
    labeled = _draw_labeled_subset(splits["train"], config)
    return CorpusSplit(
        vocab=vocab,
        train=splits["train"],
        dev=splits["dev"],
        test=splits["test"],
        labeled_subset=labeled,
    )


def _draw_labeled_subset(train: list[TokenSequence], config: CorpusConfig) -> dict[str, dict[str, list[int]]]:
    """First n_labeled train indices per class, in corpus order."""
    subset: dict[str, dict[str, list[int]]] = {}
    for attr, classes in ATTRIBUTES.items():
        per_class: dict[str, list[int]] = {c: [] for c in classes}
        for idx, seq in enumerate(train):
            cls = seq.labels[attr]
            bucket = per_class[cls]
            if len(bucket) < config.n_labeled_per_class:
                bucket.append(idx)
        for cls, bucket in per_class.items():
            if len(bucket) < config.n_labeled_per_class:
                raise ValueError(
                    f"attribute {attr!r} class {cls!r}: only {len(bucket)} labeled "
                    f"examples available, need {config.n_labeled_per_class}"
                )
        subset[attr] = per_class
    return subset


# ---------------------------------------------------------------------------
# persistence: newline-delimited JSON, one record per sequence


def _seq_to_json(seq: TokenSequence) -> str:
    labels = dict(seq.labels)
    labels["keywords"] = list(labels["keywords"])
    return json.dumps({"ids": list(seq.ids), "labels": labels}, sort_keys=True)


def _seq_from_json(line: str, lineno: int, path: Path) -> TokenSequence:
    try:
        obj = json.loads(line)
        labels = obj["labels"]
        labels["keywords"] = tuple(labels["keywords"])
        return TokenSequence(ids=tuple(obj["ids"]), labels=labels)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(f"{path}: malformed record on line {lineno}: {e}") from e


def save_corpus(path: str | Path, corpus: CorpusSplit) -> None:
    """One file per split plus a vocabulary file, all under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in ("train", "dev", "test"):
        lines = [_seq_to_json(s) for s in corpus.split(name)]
        (path / f"{name}.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    (path / "labeled.json").write_text(
        json.dumps(corpus.labeled_subset, sort_keys=True, indent=0) + "\n", encoding="utf-8"
    )
    save_vocabulary(path / "vocab.json", corpus.vocab)


def load_corpus(path: str | Path) -> CorpusSplit:
    path = Path(path)
    vocab = load_vocabulary(path / "vocab.json")
    splits: dict[str, list[TokenSequence]] = {}
    for name in ("train", "dev", "test"):
        fpath = path / f"{name}.jsonl"
        if not fpath.exists():
            raise FileNotFoundError(f"missing corpus split file: {fpath}")
        seqs = []
        with fpath.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if line:
                    seqs.append(_seq_from_json(line, lineno, fpath))
        splits[name] = seqs
    labeled = json.loads((path / "labeled.json").read_text(encoding="utf-8"))
    return CorpusSplit(vocab=vocab, labeled_subset=labeled, **splits)


def save_vocabulary(path: str | Path, vocab: Vocabulary) -> None:
    obj = {
        tok: {"id": i, "class": vocab.class_map.get(tok, "reserved" if i < 3 else "neutral")}
        for i, tok in enumerate(vocab.tokens)
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=0) + "\n", encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    ordered = sorted(obj.items(), key=lambda kv: kv[1]["id"])
    ids = [rec["id"] for _, rec in ordered]
    if ids != list(range(len(ids))):
        raise CorpusFormatError(f"{path}: token ids are not dense 0..{len(ids) - 1}")
    tokens = tuple(tok for tok, _ in ordered)
    class_map = {tok: rec["class"] for tok, rec in ordered if rec["class"] not in ("reserved",)}
    return Vocabulary(tokens=tokens, class_map=class_map)
