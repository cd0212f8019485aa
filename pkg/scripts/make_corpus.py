"""Generate the committed toy corpus: deterministic pseudo-English built from
a seeded word-bigram chain. Regenerating with the same seed reproduces the
file byte for byte.

Usage: python scripts/make_corpus.py [out_path] [size_bytes] [seed]
"""

import sys

import numpy as np

WORDS = [
    "the", "a", "an", "of", "to", "and", "in", "on", "for", "with",
    "cat", "dog", "fox", "owl", "hen", "ant", "bee", "elk", "ram", "colt",
    "river", "stone", "field", "tower", "house", "forest", "garden", "meadow",
    "runs", "sits", "waits", "sleeps", "jumps", "hides", "sings", "walks",
    "old", "new", "tall", "small", "quick", "quiet", "bright", "dark",
    "near", "under", "over", "beside", "behind", "past",
    "morning", "evening", "winter", "summer", "rain", "snow", "wind", "sun",
    "watches", "follows", "finds", "keeps", "loses", "makes", "takes",
    "red", "grey", "green", "amber", "pale",
]


def build_chain(rng: np.random.Generator):
    """Each word gets a fixed successor set with Zipf-ish weights."""
    chain = {}
    for w in WORDS:
        succ = rng.choice(len(WORDS), size=8, replace=False)
        weights = 1.0 / np.arange(1, 9)
        chain[w] = (succ, weights / weights.sum())
    return chain


def generate(size: int, seed: int) -> str:
    rng = np.random.Generator(np.random.PCG64(seed))
    chain = build_chain(rng)
    pieces = []
    total = 0
    word = WORDS[0]
    line_len = 0
    while total < size:
        sent_len = int(rng.integers(4, 10))
        sent = []
        for _ in range(sent_len):
            succ, wts = chain[word]
            word = WORDS[int(rng.choice(succ, p=wts))]
            sent.append(word)
        text = " ".join(sent) + "."
        if line_len + len(text) + 1 > 72:
            pieces.append("\n")
            total += 1
            line_len = 0
        elif pieces:
            pieces.append(" ")
            total += 1
            line_len += 1
        pieces.append(text)
        total += len(text)
        line_len += len(text)
    return "".join(pieces) + "\n"


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/tiny.txt"
    size = int(sys.argv[2]) if len(sys.argv) > 2 else 131072
    seed = int(sys.argv[3]) if len(sys.argv) > 3 else 77
    text = generate(size, seed)
    with open(out, "w") as f:
        f.write(text)
    print(f"wrote {out}: {len(text)} bytes, {len(set(text))} distinct chars")


if __name__ == "__main__":
    main()
