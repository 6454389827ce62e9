"""Action-label encoders: one-hot and static word-vector tables.

Vector-table files hold one ``<token> <f1> ... <fD>`` row per line (GloVe text
format). A BERT variant is just a table exported per class name.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class WordVectorTable:
    vectors: Dict[str, np.ndarray] = field(repr=False)
    dim: int

    def __post_init__(self):
        for token, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise EmbeddingError(f"vector for {token!r} has shape {vec.shape}, expected ({self.dim},)")

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, token):
        return token.lower() in self.vectors

    def get(self, token) -> Optional[np.ndarray]:
        return self.vectors.get(token.lower())


def load_vector_table(path: str) -> WordVectorTable:
    vectors = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split(" ")
            if not line.strip():
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.asarray([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise EmbeddingError(f"{path}:{lineno}: {exc}") from exc
            if dim is None:
                dim = len(vec)
                if dim == 0:
                    raise EmbeddingError(f"{path}:{lineno}: token without a vector")
            elif len(vec) != dim:
                raise EmbeddingError(f"{path}:{lineno}: ragged row ({len(vec)} values, expected {dim})")
            vectors[token.lower()] = vec
    if dim is None:
        raise EmbeddingError(f"{path}: empty vector table")
    return WordVectorTable(vectors, dim)


def encode_one_hot(class_id: int, num_classes: int) -> np.ndarray:
    if not 0 <= class_id < num_classes:
        raise EmbeddingError(f"class id {class_id} outside [0, {num_classes})")
    vec = np.zeros(num_classes, dtype=np.float32)
    vec[class_id] = 1.0
    return vec


def encode_action_name(name: str, table: WordVectorTable) -> np.ndarray:
    """Mean of the token vectors of ``name``; OOV tokens are skipped.

    If no token is known the zero vector is returned and a warning logged.
    """
    tokens = name.lower().split()
    if not tokens:
        raise EmbeddingError("empty action name")
    known = [table.get(t) for t in tokens if t in table]
    if not known:
        log.warning("no token of action %r is in the vector table; using the zero vector", name)
        return np.zeros(table.dim, dtype=np.float32)
    return np.mean(known, axis=0).astype(np.float32)


class ActionEncoder:
    """Maps class ids/names to the embedding a_e fed to the motion generator."""

    def __init__(self, classes: Sequence[str], table: Optional[WordVectorTable] = None):
        self.classes: List[str] = list(classes)
        self.table = table

    @property
    def dim(self) -> int:
        return self.table.dim if self.table is not None else len(self.classes)

    @property
    def kind(self) -> str:
        return "table" if self.table is not None else "onehot"

    def encode_id(self, class_id: int) -> np.ndarray:
        if self.table is None:
            return encode_one_hot(class_id, len(self.classes))
        if not 0 <= class_id < len(self.classes):
            raise EmbeddingError(f"class id {class_id} outside [0, {len(self.classes)})")
        return encode_action_name(self.classes[class_id], self.table)

    def encode_name(self, name: str) -> np.ndarray:
        if self.table is not None:
            return encode_action_name(name, self.table)
        key = " ".join(name.lower().replace("_", " ").split())
        lookup = {" ".join(c.lower().split()): i for i, c in enumerate(self.classes)}
        if key not in lookup:
            raise EmbeddingError(f"action {name!r} is not in the one-hot vocabulary {self.classes}")
        return encode_one_hot(lookup[key], len(self.classes))

    def encode_batch(self, class_ids) -> np.ndarray:
        return np.stack([self.encode_id(int(c)) for c in class_ids])
