"""Synthetic English-like corpus with known synonym groups.

The built-in corpus is generated from a small phrase grammar whose content
words come in synonym groups. The groups double as the "lexicon" the
feature-hash embedder uses to place synonyms on the same features, which is
what lets a paraphrase keep its embedding while an unrelated substitution
moves it.

Run ``python -m semkey.corpus`` to regenerate the shipped data files.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

DATA_DIR = Path(__file__).parent / "data"
CORPUS_PATH = DATA_DIR / "corpus.txt"
LEXICON_PATH = DATA_DIR / "lexicon.txt"
SYNONYMS_PATH = DATA_DIR / "synonyms.txt"

DETERMINERS = [["the"], ["a"], ["this", "that"], ["every", "each"], ["some"], ["my"], ["our"], ["his"], ["her"]]

ADJECTIVES = [
    ["big", "large", "huge"], ["small", "little", "tiny"], ["quick", "fast", "rapid"],
    ["slow", "sluggish"], ["old", "ancient", "aged"], ["young", "youthful"],
    ["happy", "glad", "cheerful"], ["sad", "unhappy", "gloomy"], ["bright", "shiny", "brilliant"],
    ["dark", "dim", "shadowy"], ["quiet", "silent", "calm"], ["loud", "noisy"],
    ["strong", "sturdy", "powerful"], ["weak", "feeble", "frail"], ["clever", "smart", "wise"],
    ["kind", "gentle", "friendly"], ["cold", "chilly", "icy"], ["warm", "hot", "heated"],
    ["beautiful", "pretty", "lovely"], ["strange", "odd", "curious"], ["green"], ["red"],
    ["blue"], ["empty", "vacant", "bare"], ["busy", "crowded"],
]

NOUNS = [
    ["dog", "hound", "puppy"], ["cat", "kitten", "feline"], ["house", "home", "dwelling"],
    ["car", "automobile", "vehicle"], ["city", "town", "metropolis"], ["road", "street", "path"],
    ["child", "kid", "youngster"], ["man", "gentleman", "fellow"], ["woman", "lady"],
    ["river", "stream", "creek"], ["forest", "woods", "woodland"], ["book", "novel", "volume"],
    ["teacher", "instructor", "tutor"], ["doctor", "physician", "healer"],
    ["friend", "companion", "pal"], ["garden", "yard"], ["ship", "boat", "vessel"],
    ["hill", "mound"], ["mountain", "peak", "summit"], ["story", "tale", "legend"],
    ["song", "tune", "melody"], ["meal", "dinner", "supper"], ["bird", "sparrow"],
    ["horse", "pony", "stallion"], ["farmer", "grower"], ["king", "monarch", "ruler"],
    ["village", "hamlet"], ["lake", "pond"], ["letter", "note", "message"],
    ["market", "bazaar", "shop"], ["window"], ["door", "gate"], ["bridge"], ["tree", "oak"],
    ["stone", "rock", "pebble"], ["storm", "tempest"], ["night", "evening"],
    ["morning", "dawn"], ["soldier", "warrior", "fighter"], ["student", "pupil", "learner"],
]

INTRANSITIVE = [
    ["ran", "sprinted", "dashed"], ["walked", "strolled", "wandered"], ["slept", "dozed", "napped"],
    ["laughed", "giggled", "chuckled"], ["cried", "wept", "sobbed"], ["jumped", "leaped", "hopped"],
    ["sang", "chanted"], ["shouted", "yelled", "hollered"], ["waited", "lingered", "paused"],
    ["spoke", "talked"], ["arrived", "came"], ["left", "departed"], ["rested", "relaxed"],
    ["danced", "twirled"], ["worked", "labored", "toiled"], ["smiled", "grinned", "beamed"],
]

TRANSITIVE = [
    ["saw", "noticed", "spotted"], ["liked", "enjoyed", "loved"], ["found", "discovered", "located"],
    ["built", "made", "constructed"], ["read", "studied"], ["helped", "assisted", "aided"],
    ["followed", "chased", "pursued"], ["visited", "toured"], ["painted", "drew", "sketched"],
    ["carried", "hauled", "lifted"], ["watched", "observed", "viewed"], ["feared", "dreaded"],
    ["cleaned", "washed", "scrubbed"], ["sold", "traded"], ["remembered", "recalled"],
]

ADVERBS = [
    ["quickly", "rapidly", "swiftly"], ["slowly", "gradually", "leisurely"],
    ["happily", "gladly", "joyfully"], ["quietly", "silently", "softly"],
    ["often", "frequently"], ["today"], ["yesterday"], ["again", "once more"],
    ["loudly", "noisily"], ["carefully", "cautiously"], ["suddenly", "abruptly"], ["together"],
]

PREPOSITIONS = [
    ["near", "beside", "by"], ["in", "inside", "within"], ["across", "over"], ["behind"],
    ["under", "beneath", "below"], ["through"], ["toward", "towards"], ["around"], ["past"],
    ["with"], ["from"],
]

CONJUNCTIONS = [["and"], ["but"], ["while"], ["because"], ["so"], ["then"]]

PUNCT = [["."], [","]]

CATEGORIES = {
    "det": DETERMINERS, "adj": ADJECTIVES, "noun": NOUNS, "verb": INTRANSITIVE,
    "tverb": TRANSITIVE, "adv": ADVERBS, "prep": PREPOSITIONS, "conj": CONJUNCTIONS,
    "punct": PUNCT,
}


def _zipf(n: int, s: float = 1.0) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


class _Sentences:
    """Phrase grammar sampler. Each document draws a topic that skews noun choice."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.topic_nouns = None

    def word(self, groups, weights=None) -> str:
        g = groups[self.rng.choice(len(groups), p=weights)]
        w = g[self.rng.integers(len(g))]
        return w

    def noun_phrase(self) -> list[str]:
        out = [self.word(DETERMINERS)]
        r = self.rng.random()
        if r < 0.45:
            out.append(self.word(ADJECTIVES))
        elif r < 0.6:
            out += [self.word(ADJECTIVES), self.word(ADJECTIVES)]
        out.append(self.word(NOUNS, self.topic_nouns))
        return out

    def prep_phrase(self) -> list[str]:
        return [self.word(PREPOSITIONS)] + self.noun_phrase()

    def clause(self) -> list[str]:
        out = self.noun_phrase()
        if self.rng.random() < 0.5:
            out.append(self.word(INTRANSITIVE))
            if self.rng.random() < 0.5:
                out += self.word(ADVERBS).split()
        else:
            out.append(self.word(TRANSITIVE))
            out += self.noun_phrase()
        if self.rng.random() < 0.5:
            out += self.prep_phrase()
        return out

    def sentence(self) -> list[str]:
        out = self.clause()
        if self.rng.random() < 0.35:
            if self.rng.random() < 0.5:
                out.append(",")
            out.append(self.word(CONJUNCTIONS))
            out += self.clause()
        out.append(".")
        return out

    def document(self, n_sentences: int) -> str:
        perm = self.rng.permutation(len(NOUNS))
        w = np.empty(len(NOUNS))
        w[perm] = _zipf(len(NOUNS), 0.8)
        self.topic_nouns = w
        words: list[str] = []
        for _ in range(n_sentences):
            words += self.sentence()
        return " ".join(words)


def synthetic_corpus(n_docs: int = 2000, sentences_per_doc: int = 6, seed: int = 0) -> list[str]:
    """Return ``n_docs`` documents, one string each."""
    gen = _Sentences(np.random.default_rng(seed))
    return [gen.document(sentences_per_doc) for _ in range(n_docs)]


def lexicon_groups() -> list[tuple[str, list[str]]]:
    """(category, synonym group) pairs over single tokens; multi-word entries are dropped."""
    groups = []
    for cat, gs in CATEGORIES.items():
        for g in gs:
            words = [w for w in g if " " not in w]
            if words:
                groups.append((cat, words))
    return groups


def write_lexicon(path: Path, groups) -> None:
    """One group per line: ``<category>: <word> <word> ...``."""
    with open(path, "w", encoding="utf-8") as f:
        for cat, words in groups:
            f.write(f"{cat}: {' '.join(words)}\n")


def read_lexicon(path) -> list[tuple[str | None, list[str]]]:
    """Parse a lexicon file; lines without a ``category:`` head get category None."""
    groups = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            head, sep, rest = line.partition(":")
            if sep and " " not in head.strip():
                groups.append((head.strip(), rest.split()))
            else:
                groups.append((None, line.split()))
    return groups


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="Regenerate the built-in corpus, lexicon and synonym table.")
    p.add_argument("--docs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=DATA_DIR)
    args = p.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    docs = synthetic_corpus(args.docs, seed=args.seed)
    (args.out_dir / "corpus.txt").write_text("\n".join(docs) + "\n", encoding="utf-8")
    write_lexicon(args.out_dir / "lexicon.txt", lexicon_groups())
    # synonym table is derived from the embedder, so build it from the files just written
    from .attacks import build_synonym_table, save_synonym_table
    from .embed import EmbedderConfig, make_embedder
    from .textmodel import Vocabulary
    vocab = Vocabulary.from_corpus(docs)
    emb = make_embedder(EmbedderConfig(lexicon_path=str(args.out_dir / "lexicon.txt")), vocab)
    save_synonym_table(build_synonym_table(vocab, emb), args.out_dir / "synonyms.txt")


if __name__ == "__main__":
    main()
