"""Regenerates metric_cases.json.

BLEU-4 comes from NLTK. CIDEr is a direct numpy transcription of the
TF-IDF cosine definition. METEOR-lite alignments (matches, chunks) are
counted by hand below and only plugged into the formula here.

    python3 metric_oracles.py > metric_cases.json
"""
import json
import math
from collections import Counter

import numpy as np
from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu

BLEU = [
    ("identical", "the cat sat on the mat", ["the cat sat on the mat"], False),
    ("no shared 4-gram", "the cat sat on a rug", ["a dog lay under the table"], False),
    ("five of six unigrams", "the cat sat on the mat", ["the cat sat on a mat"], False),
    ("clipped repeats", "the the the the the the the", ["the cat is on the mat", "there is a cat on the mat"], False),
    ("clipped repeats smoothed", "the the the the the the the", ["the cat is on the mat", "there is a cat on the mat"], True),
    ("brevity penalty", "the cat sat on", ["the cat sat on the mat today"], False),
    ("closest length tie picks shorter", "it is very soft and smooth", ["it is very soft and smooth to touch", "it is very soft"], False),
    ("five of six unigrams smoothed", "the cat sat on the mat", ["the cat sat on a mat"], True),
    ("two references", "it is hard and rough to the touch", ["it is hard to the touch", "the object is hard and rough"], False),
    ("candidate longer than references", "yes , because it is hard and it is heavy .", ["yes , because it is hard ."], False),
    ("three tokens", "it is hard", ["it is hard"], False),
    ("three tokens smoothed", "it is hard", ["it is hard"], True),
    ("missing trigram smoothed", "soft surface feels very soft", ["the soft surface feels soft"], True),
]

CIDER = [
    ("uniform idf two docs", [
        ("hard rock", ["hard rock"]),
        ("soft cloth", ["soft cloth"]),
    ]),
    ("partial overlap", [
        ("the object feels hard .", ["the object feels hard .", "it is hard to the touch ."]),
        ("the object feels soft .", ["the object feels soft .", "it is soft to the touch ."]),
        ("it is rough", ["its roughness is rough .", "it feels rough ."]),
    ]),
    ("disjoint candidate", [
        ("zebra quartz", ["the object feels hard ."]),
        ("the object feels soft .", ["the object feels soft ."]),
    ]),
    ("reference order", [
        ("yes , because it is hard .", ["yes , since the object is hard .", "yes , because it is hard ."]),
        ("no , because it is soft .", ["no , because it is soft .", "no . it feels soft , so it is not suitable ."]),
        ("yes , it is hard enough for that .", ["yes , it is hard enough for that .", "yes , since the object is hard ."]),
    ]),
]

# (name, candidate, reference, matches, chunks), counted by hand
METEOR = [
    ("identical ten tokens", "a b c d e f g h i j", "a b c d e f g h i j", 10, 1),
    ("zero overlap", "red round ball", "soft blue cloth", 0, 0),
    ("swapped halves", "f g h i j a b c d e", "a b c d e f g h i j", 10, 2),
    ("reversed", "e d c b a", "a b c d e", 5, 5),
    ("stem match", "it feels rougher", "it feel rough", 2, 1),
    ("stem match running", "the object runs smoothly", "the object running smoothly", 4, 1),
    ("partial match", "the surface is hard", "the object is very hard", 3, 3),
    ("extra candidate tokens", "it is hard and heavy and cold", "it is hard", 3, 1),
    ("repeated word", "hard hard hard", "hard rock", 1, 1),
    ("two chunks", "it is soft , very soft", "it is soft and very soft", 5, 2),
    ("single token", "soft", "the object is soft", 1, 1),
]


def bleu_case(cand, refs, smooth):
    sf = SmoothingFunction().method2 if smooth else SmoothingFunction().method0
    return sentence_bleu([r.split() for r in refs], cand.split(), smoothing_function=sf)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def cider_corpus(pairs):
    cands = [c.split() for c, _ in pairs]
    refs = [[r.split() for r in rs] for _, rs in pairs]
    n_docs = len(pairs)
    scores = np.zeros(n_docs)
    for n in range(1, 5):
        df = Counter()
        for rs in refs:
            df.update(set(g for r in rs for g in ngrams(r, n)))

        def vec(tokens):
            return {g: c * (math.log(n_docs) - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}

        for i, (c, rs) in enumerate(zip(cands, refs)):
            vc = vec(c)
            total = 0.0
            for r in rs:
                vr = vec(r)
                nc = math.sqrt(sum(v * v for v in vc.values()))
                nr = math.sqrt(sum(v * v for v in vr.values()))
                if nc > 0 and nr > 0:
                    total += sum(v * vr.get(g, 0.0) for g, v in vc.items()) / (nc * nr)
            scores[i] += total / len(rs) / 4 * 10
    return scores.tolist()


def meteor_case(cand, ref, m, ch):
    if m == 0:
        return 0.0
    p, r = m / len(cand.split()), m / len(ref.split())
    fmean = 10 * p * r / (r + 9 * p)
    return fmean * (1 - 0.5 * (ch / m) ** 3)


out = {
    "bleu4": [
        {"name": n, "candidate": c, "references": r, "smoothing": s, "expected": bleu_case(c, r, s)}
        for n, c, r, s in BLEU
    ],
    "cider": [
        {
            "name": n,
            "candidates": [c for c, _ in pairs],
            "references": [rs for _, rs in pairs],
            "expected": cider_corpus(pairs),
        }
        for n, pairs in CIDER
    ],
    "meteor": [
        {"name": n, "candidate": c, "reference": r, "matches": m, "chunks": ch, "expected": meteor_case(c, r, m, ch)}
        for n, c, r, m, ch in METEOR
    ],
}
print(json.dumps(out, indent=2))
