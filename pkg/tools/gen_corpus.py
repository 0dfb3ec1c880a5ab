#!/usr/bin/env python3
"""Regenerate data/tiny_corpus.txt, the bundled ~1 MB char-level corpus.

The text is synthetic but statistically structured (Zipf-weighted word
choice, bigram-ish phrase templates, sentence and paragraph geometry) so
a small model has something to learn. Deterministic: rerunning this
script reproduces the file byte for byte.
"""

from pathlib import Path

import numpy as np

WORDS = """
the of and to a in that it is was for on are as with his they at be this
have from or one had by word but not what all were we when your can said
there use an each which she do how their if will up other about out many
then them these so some her would make like him into time has look two
more write go see number no way could people my than first water been
call who oil its now find long down day did get come made may part over
new sound take only little work know place year live me back give most
very after thing our just name good sentence man think say great where
help through much before line right too mean old any same tell boy
follow came want show also around form three small set put end does
another well large must big even such because turn here why ask went
men read need land different home us move try kind hand picture again
change off play spell air away animal house point page letter mother
answer found study still learn should america world high every near add
food between own below country plant last school father keep tree never
start city earth eye light thought head under story saw left dont few
while along might close something seem next hard open example begin
life always those both paper together got group often run important
until children side feet car mile night walk white sea began grow took
river four carry state once book hear stop without second later miss
idea enough eat face watch far really almost let above girl sometimes
mountain cut young talk soon list song being leave family
""".split()


def main() -> None:
    rng = np.random.Generator(np.random.PCG64(20240501))
    n_words = len(WORDS)
    # Zipf-like weights make frequencies realistic for a char-level model.
    weights = 1.0 / np.arange(1, n_words + 1) ** 0.9
    weights /= weights.sum()

    out = []
    total = 0
    target = 1_000_000
    while total < target:
        paragraphs = []
        for _ in range(rng.integers(2, 6)):
            sentences = []
            for _ in range(rng.integers(3, 8)):
                n = int(rng.integers(4, 13))
                words = rng.choice(n_words, size=n, p=weights)
                sentences.append(" ".join(WORDS[w] for w in words) + ".")
            paragraphs.append(" ".join(sentences))
        doc = "\n".join(paragraphs)
        out.append(doc)
        total += len(doc) + 2
    text = "\n\n".join(out) + "\n"

    path = Path(__file__).resolve().parent.parent / "data" / "tiny_corpus.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path} ({len(text):,} bytes)")


if __name__ == "__main__":
    main()
