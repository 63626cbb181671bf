"""Concept vectors: pretrained word vectors from text or one-hot indicators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class ConceptVocabulary:
    names: list
    vectors: np.ndarray  # (n, dim)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape[0] != len(self.names):
            raise ValueError("one vector per concept required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("concept vectors must be finite")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


def read_word_vectors(path) -> dict[str, np.ndarray]:
    """Parse a ``count dim`` header file followed by ``token v1 .. vdim`` lines."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise EmbeddingFormatError(f"{path}:1: expected '<count> <dim>' header")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise EmbeddingFormatError(f"{path}:1: header values must be integers") from None
        vectors = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected token and {dim} values, got {len(parts) - 1}"
                )
            try:
                vec = np.array([float(p) for p in parts[1:]])
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: malformed number") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{path}:{lineno}: non-finite value")
            vectors[parts[0]] = vec
    if len(vectors) != count:
        raise EmbeddingFormatError(f"{path}: header declares {count} vectors, found {len(vectors)}")
    return vectors


def load_embeddings(path, concept_names) -> ConceptVocabulary:
    """Look up each concept; multi-word concepts average their word vectors."""
    table = read_word_vectors(path)
    names = list(concept_names)
    missing = []
    rows = []
    for name in names:
        words = name.split()
        unknown = [w for w in words if w not in table]
        if not words or unknown:
            missing.append(name)
            continue
        rows.append(np.mean([table[w] for w in words], axis=0))
    if missing:
        raise KeyError(f"unresolved concepts: {', '.join(missing)}")
    return ConceptVocabulary(names, np.stack(rows))


def one_hot_vocabulary(concept_names) -> ConceptVocabulary:
    names = list(concept_names)
    if not names:
        raise ValueError("need at least one concept")
    return ConceptVocabulary(names, np.eye(len(names)))


def write_word_vectors(path, vectors: dict) -> None:
    """Write vectors in the format read by :func:`read_word_vectors`."""
    items = list(vectors.items())
    dim = len(items[0][1]) if items else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(items)} {dim}\n")
        for token, vec in items:
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")
