"""Constant per-class label-text embeddings and the pool that serves them.

Embeddings are produced once, before training starts, and are read-only
afterwards. They arrive either from a CSV written by an external text
encoder (see ``tools/encode_labels.py``) or from the seeded Gaussian
fallback used when no encoder output is available. The training loop only
ever calls :func:`lookup`; a module-level construction counter lets the
loop assert that no pool is built mid-run.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field

import torch

from .errors import EmbeddingIngestError, EmbeddingLookupError, TemplateError
from .utils import tensor_fingerprint

CLASS_NAME_PLACEHOLDER = "{class_name}"
CLASS_INDEX_PLACEHOLDER = "{class_index}"

# The three prompt templates exposed by the CLI / ablation axis.
PROMPT_TEMPLATES = {
    "P1": "a class of a {class_name}",
    "P2": "a photo of a {class_name}",
    "P3": "a photo of a {class_index}",
}

_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")

# Counts every pool construction (file, fallback, or direct). distill()
# snapshots this to prove the encoder/ingestion path never runs mid-training.
_CONSTRUCTION_COUNT = 0


def construction_count() -> int:
    return _CONSTRUCTION_COUNT


def _count_construction() -> None:
    global _CONSTRUCTION_COUNT
    _CONSTRUCTION_COUNT += 1


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt pattern with exactly one supported placeholder."""

    pattern: str

    def __post_init__(self) -> None:
        tokens = _PLACEHOLDER_RE.findall(self.pattern)
        supported = [t for t in tokens if t in ("class_name", "class_index")]
        unknown = [t for t in tokens if t not in ("class_name", "class_index")]
        if unknown:
            raise TemplateError(f"unknown placeholder {{{unknown[0]}}} in {self.pattern!r}")
        if len(supported) != 1:
            raise TemplateError(
                f"template must contain exactly one placeholder, got {len(supported)}: {self.pattern!r}"
            )

    @property
    def uses_class_index(self) -> bool:
        return CLASS_INDEX_PLACEHOLDER in self.pattern


@dataclass
class LTEPool:
    """Fixed per-class embedding vectors, keyed by class id 0..K-1.

    Immutable after construction: lookups return copies and the content
    fingerprint taken at build time can be re-checked at any point.
    """

    embeddings: torch.Tensor  # (K, dim_e) float32
    class_names: list[str]
    provenance: str
    _fingerprint: str = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] == 0:
            raise EmbeddingIngestError("pool requires a non-empty (K, dim_e) matrix")
        if len(self.class_names) != self.embeddings.shape[0]:
            raise EmbeddingIngestError("class_names length must equal the class count")
        if not torch.isfinite(self.embeddings).all():
            raise EmbeddingIngestError("pool contains non-finite entries")
        self.embeddings = self.embeddings.to(torch.float32)
        object.__setattr__(self, "_fingerprint", tensor_fingerprint(self.embeddings))
        _count_construction()

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim_e(self) -> int:
        return self.embeddings.shape[1]

    def assert_unchanged(self) -> None:
        if tensor_fingerprint(self.embeddings) != self._fingerprint:
            raise EmbeddingIngestError("pool vectors were mutated after construction")


def build_prompts(template: PromptTemplate | str, class_names: list[str]) -> list[str]:
    """Expand one prompt per class, substituting the template's placeholder.

    ``{class_index}`` substitutes the 0-based list position, so it works
    even when class names carry no meaning.
    """
    if isinstance(template, str):
        template = PromptTemplate(template)
    if template.uses_class_index:
        return [template.pattern.replace(CLASS_INDEX_PLACEHOLDER, str(i)) for i in range(len(class_names))]
    return [template.pattern.replace(CLASS_NAME_PLACEHOLDER, name) for name in class_names]


def load_embedding_file(path: str) -> LTEPool:
    """Read an embedding CSV (header ``class_id,label_text,d0,...``) into a pool.

    Rows may arrive in any order; ids must be exactly 0..K-1 with no
    duplicates and every row must carry the full, finite vector.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmbeddingIngestError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "class_id" or header[1] != "label_text":
            raise EmbeddingIngestError(f"{path}: header must start with class_id,label_text,d0,...")
        dim_e = len(header) - 2
        expected_dims = [f"d{i}" for i in range(dim_e)]
        if header[2:] != expected_dims:
            raise EmbeddingIngestError(f"{path}: dimension columns must be d0..d{dim_e - 1}")

        rows: dict[int, torch.Tensor] = {}
        names: dict[int, str] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim_e + 2:
                raise EmbeddingIngestError(f"{path}: line {lineno}: expected {dim_e + 2} fields, got {len(row)}")
            try:
                class_id = int(row[0])
            except ValueError:
                raise EmbeddingIngestError(f"{path}: line {lineno}: class_id {row[0]!r} is not an integer") from None
            if class_id < 0:
                raise EmbeddingIngestError(f"{path}: line {lineno}: class_id {class_id} is negative")
            if class_id in rows:
                raise EmbeddingIngestError(f"{path}: line {lineno}: duplicate class_id {class_id}")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise EmbeddingIngestError(f"{path}: line {lineno}: non-numeric embedding entry") from None
            if not all(math.isfinite(v) for v in values):
                raise EmbeddingIngestError(f"{path}: line {lineno}: non-finite value in class_id {class_id}")
            rows[class_id] = torch.tensor(values, dtype=torch.float32)
            names[class_id] = row[1]

    if not rows:
        raise EmbeddingIngestError(f"{path}: no embedding rows")
    k = len(rows)
    missing = sorted(set(range(k)) - set(rows))
    if missing:
        raise EmbeddingIngestError(f"{path}: class ids must cover 0..{k - 1}, missing {missing[:5]}")
    matrix = torch.stack([rows[i] for i in range(k)])
    return LTEPool(matrix, [names[i] for i in range(k)], provenance=str(path))


def save_embedding_file(pool: LTEPool, path: str) -> None:
    """Write a pool back out in the ingestion CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "label_text"] + [f"d{i}" for i in range(pool.dim_e)])
        for class_id in range(pool.num_classes):
            vec = [repr(float(v)) for v in pool.embeddings[class_id].tolist()]
            writer.writerow([class_id, pool.class_names[class_id]] + vec)


def fallback_embeddings(num_classes: int, dim_e: int, seed: int) -> LTEPool:
    """Seeded standard-normal stand-in pool for encoder-less environments.

    Dense random vectors rather than one-hots, so the pool keeps the
    properties the rest of the pipeline relies on (distinct, full-width
    rows). Bit-identical for identical (num_classes, dim_e, seed).
    """
    if num_classes < 1 or dim_e < 1:
        raise EmbeddingIngestError("fallback pool requires num_classes >= 1 and dim_e >= 1")
    g = torch.Generator()
    g.manual_seed(seed)
    matrix = torch.randn(num_classes, dim_e, generator=g)
    names = [str(i) for i in range(num_classes)]
    return LTEPool(matrix, names, provenance=f"fallback:{seed}")


def lookup(pool: LTEPool, labels) -> torch.Tensor:
    """Return the (B, dim_e) matrix of pool rows for the given class ids.

    Duplicates are allowed; the result is a copy, never a view into the pool.
    """
    idx = torch.as_tensor(labels, dtype=torch.long)
    if idx.ndim != 1:
        raise EmbeddingLookupError("labels must be a 1-D sequence of class ids")
    if idx.numel() > 0 and (idx.min() < 0 or idx.max() >= pool.num_classes):
        bad = idx[(idx < 0) | (idx >= pool.num_classes)][0].item()
        raise EmbeddingLookupError(f"class id {bad} outside 0..{pool.num_classes - 1}")
    return pool.embeddings[idx].clone()
