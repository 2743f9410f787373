"""Token-level query/document embeddings, toy encoders and the LIRE file format.

LIRE layout (little-endian)::

    magic   4 bytes  b"LIRE"
    version u16      1
    h       u32      columns of every sequence
    count   u32      number of sequences
    then per sequence:
        id_len u32, id bytes (utf-8), n_tokens u32, n_tokens * h float32 values (row-major)
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kbvqa.config import ToyEncoderConfig
from kbvqa.errors import ContractError, DimensionError, EmptyQueryError, FormatError
from kbvqa.numerics import Mat, as_mat, l2_normalize_rows

MAGIC = b"LIRE"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_U32 = struct.Struct("<I")

IMAGE_TOKENS_PER_UNIT = 4

_PUNCT = re.compile(r"^\W+|\W+$")


@dataclass(frozen=True)
class QueryEmbedding:
    query_id: str
    tokens: Mat
    image_token_count: int
    text_token_count: int

    def __post_init__(self):
        if self.image_token_count + self.text_token_count != self.tokens.shape[0]:
            raise DimensionError(f"query {self.query_id}: token counts do not add up to {self.tokens.shape[0]}")
        if self.tokens.shape[0] == 0:
            raise EmptyQueryError(f"query {self.query_id} has no tokens")

    @property
    def dim(self):
        return self.tokens.shape[1]

    @classmethod
    def from_tokens(cls, query_id, tokens, image_token_count=0):
        tokens = as_mat(tokens, name=f"query {query_id}")
        return cls(query_id, tokens, image_token_count, tokens.shape[0] - image_token_count)


@dataclass(frozen=True)
class DocumentEmbedding:
    doc_id: str
    tokens: Mat

    def __post_init__(self):
        if self.tokens.shape[0] == 0:
            raise ContractError(f"document {self.doc_id} has no tokens")

    @property
    def dim(self):
        return self.tokens.shape[1]


def build_query_embedding(image_tokens, text_tokens, query_id) -> QueryEmbedding:
    image = np.asarray(image_tokens, dtype=np.float64)
    text = np.asarray(text_tokens, dtype=np.float64)
    if image.size == 0 and text.size == 0:
        raise EmptyQueryError(f"query {query_id}: both image and text parts are empty")
    if image.size and text.size and image.shape[1] != text.shape[1]:
        raise DimensionError(f"query {query_id}: image h={image.shape[1]} but text h={text.shape[1]}")
    dim = image.shape[1] if image.size else text.shape[1]
    image = as_mat(image.reshape(-1, dim), cols=dim, name="image tokens")
    text = as_mat(text.reshape(-1, dim), cols=dim, name="text tokens")
    return QueryEmbedding(query_id, np.vstack([image, text]), image.shape[0], text.shape[0])


def _hash_vector(key: str, config: ToyEncoderConfig) -> np.ndarray:
    digest = hashlib.blake2b(f"{config.salt}|{config.seed}|{key}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(config.dim)
    return vec / np.linalg.norm(vec)


def _word_key(word: str) -> str:
    return _PUNCT.sub("", word.lower()) or word


def toy_encode_text(text: str, config: ToyEncoderConfig) -> Mat:
    rows = [
        _hash_vector(f"word:{_word_key(word)}:{t}", config)
        for word in text.split()
        for t in range(config.tokens_per_word)
    ]
    if not rows:
        return np.zeros((0, config.dim))
    return np.vstack(rows)


def toy_encode_image(image_descriptor: str, config: ToyEncoderConfig) -> Mat:
    # An empty descriptor still yields the fixed token count (blank image).
    count = IMAGE_TOKENS_PER_UNIT * config.tokens_per_word
    return np.vstack([_hash_vector(f"image:{image_descriptor}:{t}", config) for t in range(count)])


def toy_encode_query(query_id, question, image_descriptor, config: ToyEncoderConfig) -> QueryEmbedding:
    return build_query_embedding(
        toy_encode_image(image_descriptor, config), toy_encode_text(question, config), query_id
    )


def toy_encode_document(doc_id, text, config: ToyEncoderConfig) -> DocumentEmbedding:
    return DocumentEmbedding(doc_id, l2_normalize_rows(toy_encode_text(text, config)))


def write_embedding_file(path, sequences, dim=None):
    """Write ``(id, matrix)`` pairs; every matrix must share the column count."""
    sequences = list(sequences)
    if dim is None:
        dim = sequences[0][1].shape[1] if sequences else 0
    chunks = [_HEADER.pack(MAGIC, VERSION, dim, len(sequences))]
    for seq_id, tokens in sequences:
        tokens = as_mat(tokens, name=f"sequence {seq_id}")
        if tokens.shape[1] != dim and tokens.shape[0] > 0:
            raise DimensionError(f"sequence {seq_id} has h={tokens.shape[1]}, file h={dim}")
        raw_id = str(seq_id).encode("utf-8")
        chunks.append(_U32.pack(len(raw_id)))
        chunks.append(raw_id)
        chunks.append(_U32.pack(tokens.shape[0]))
        chunks.append(tokens.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_embedding_file(path) -> list[tuple[str, Mat]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated LIRE header", offset=len(blob))
    magic, version, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported LIRE version {version}", offset=4)
    offset = _HEADER.size
    out = []

    def take(n):
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(f"truncated payload: need {n} bytes, {len(blob) - offset} left", offset=offset)
        view = blob[offset:offset + n]
        offset += n
        return view

    for _ in range(count):
        (id_len,) = _U32.unpack(take(4))
        seq_id = take(id_len).decode("utf-8")
        (n_tokens,) = _U32.unpack(take(4))
        values = np.frombuffer(take(4 * n_tokens * dim), dtype="<f4")
        out.append((seq_id, values.astype(np.float64).reshape(n_tokens, dim)))
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last sequence", offset=offset)
    return out


def embedding_file_roundtrip(path, sequences, dim=None):
    write_embedding_file(path, sequences, dim=dim)
    return read_embedding_file(path)
