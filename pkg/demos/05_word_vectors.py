"""
Concept vectors from a word-vector file
=======================================
"""

import os
import tempfile

import numpy as np

from attnxfer import embedding
from attnxfer import energynet as en

path = os.path.join(tempfile.mkdtemp(), "vectors.txt")
embedding.write_word_vectors(path, {"hug": [1.0, 0.0], "kiss": [0.0, 1.0], "high": [1.0, 0.0],
                                    "five": [0.0, 1.0]})

vocab = embedding.load_embeddings(path, ["hug", "kiss", "high five"])
print(vocab.vectors)  # "high five" is the mean of its two words

for a in range(3):
    for b in range(a + 1, 3):
        d = en.cosine_distance(vocab.vectors[a], vocab.vectors[b])
        print(f"D({vocab.names[a]}, {vocab.names[b]}) = {d:.3f}")

try:
    embedding.load_embeddings(path, ["juggle"])
except KeyError as exc:
    print("error:", exc)

print(embedding.one_hot_vocabulary(["hug", "kiss"]).vectors)
