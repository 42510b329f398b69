"""Instance and description encoders.

The trainable instance encoder is a desk-scale stand-in for a large
pretrained model: token + position embeddings, one single-head self-attention
block, and one tanh feed-forward block, both with residual connections so
that zeroing the mixing weights makes the encoder an exact identity on the
embeddings.  Entity spans are max-pooled over their hidden states, and the
context representation is a tanh linear layer over the concatenated hidden
states of the two opening marker tokens.

The description encoder is frozen: a fixed randomly-initialized embedding
table, mean pooling over tokens, a fixed linear map, and tanh.  Its outputs
never change during training and are cached per unique token sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

MARKER_HEAD_OPEN = "[E_h]"
MARKER_HEAD_CLOSE = "[\\E_h]"
MARKER_TAIL_OPEN = "[E_t]"
MARKER_TAIL_CLOSE = "[\\E_t]"
MARKERS = (MARKER_HEAD_OPEN, MARKER_HEAD_CLOSE, MARKER_TAIL_OPEN, MARKER_TAIL_CLOSE)
UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"
RESERVED = MARKERS + (UNK_TOKEN, PAD_TOKEN)

HEAD_OPEN_ID, HEAD_CLOSE_ID, TAIL_OPEN_ID, TAIL_CLOSE_ID = 0, 1, 2, 3
UNK_ID, PAD_ID = 4, 5

DescriptionMode = Literal["keyword", "synonyms", "template"]
DESCRIPTION_MODES = ("keyword", "synonyms", "template")


class DatasetError(ValueError):
    """A corpus object violates a structural invariant."""


@dataclass
class Vocabulary:
    """Dense token-to-id table; the first six ids are reserved."""

    tokens: list[str]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_content_tokens(cls, words: Iterable[str]) -> "Vocabulary":
        content = sorted(set(words))
        for w in content:
            if w in RESERVED:
                raise DatasetError(f"reserved token {w!r} used as a content word")
        tokens = list(RESERVED) + content
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def save(self, path: Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise DatasetError(f"{path}: first {len(RESERVED)} lines must be the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DatasetError(f"{path}: duplicate tokens")
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


@dataclass
class Instance:
    """A tokenized sentence with marked head/tail entity spans.

    Spans are inclusive token indexes of the entity content words; the
    opening/closing markers sit immediately outside each span.
    """

    token_ids: list[int]
    head_span: tuple[int, int]
    tail_span: tuple[int, int]
    relation_id: int
    uid: int = -1

    def validate(self) -> None:
        n = len(self.token_ids)
        bh, eh = self.head_span
        bt, et = self.tail_span
        label = f"instance {self.uid}"
        if not (1 <= bh <= eh < n - 1 and 1 <= bt <= et < n - 1):
            raise DatasetError(f"{label}: spans {self.head_span}/{self.tail_span} out of bounds for {n} tokens")
        if self.token_ids[bh - 1] != HEAD_OPEN_ID or self.token_ids[eh + 1] != HEAD_CLOSE_ID:
            raise DatasetError(f"{label}: head span not wrapped by head markers")
        if self.token_ids[bt - 1] != TAIL_OPEN_ID or self.token_ids[et + 1] != TAIL_CLOSE_ID:
            raise DatasetError(f"{label}: tail span not wrapped by tail markers")
        if not (eh + 1 < bt - 1 or et + 1 < bh - 1):
            raise DatasetError(f"{label}: head and tail spans overlap")


@dataclass
class RelationDescription:
    """A relation's description text plus entity hypernyms and synonyms."""

    relation_id: int
    name: str
    description: list[str]
    head_keywords: list[str]
    tail_keywords: list[str]
    head_synonyms: list[str] = field(default_factory=list)
    tail_synonyms: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.head_keywords or not self.tail_keywords:
            raise DatasetError(f"relation {self.name!r}: hypernym keyword lists must be non-empty")
        if not self.description:
            raise DatasetError(f"relation {self.name!r}: empty description")


@dataclass
class EncodedDescription:
    """Fixed vectors from the frozen encoder: context d, head d^h, tail d^t."""

    context: np.ndarray
    head: np.ndarray
    tail: np.ndarray


@dataclass
class EncodedInstance:
    """Hidden states plus pooled representations (graph nodes or arrays)."""

    hidden: object
    context: object
    head: object
    tail: object


@dataclass
class ModelParams:
    """All trainable tensors of the matching model."""

    tok_emb: np.ndarray
    pos_emb: np.ndarray
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    ff: np.ndarray
    phi_w: np.ndarray
    phi_b: np.ndarray
    query_code: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    @property
    def dim(self) -> int:
        return self.tok_emb.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]

    @property
    def n_classes(self) -> int:
        return self.cls_b.shape[0]

    @classmethod
    def init(
        cls,
        vocab_size: int,
        dim: int,
        max_len: int,
        n_classes: int,
        rng: np.random.Generator,
    ) -> "ModelParams":
        if dim <= 0 or n_classes < 2:
            raise ValueError(f"need dim > 0 and >= 2 classes, got dim={dim}, classes={n_classes}")
        s = 1.0 / math.sqrt(dim)
        return cls(
            tok_emb=rng.normal(0.0, s, (vocab_size, dim)),
            pos_emb=rng.normal(0.0, 0.5 * s, (max_len, dim)),
            attn_q=rng.normal(0.0, s, (dim, dim)),
            attn_k=rng.normal(0.0, s, (dim, dim)),
            attn_v=rng.normal(0.0, s, (dim, dim)),
            attn_o=rng.normal(0.0, s, (dim, dim)),
            ff=rng.normal(0.0, s, (dim, dim)),
            phi_w=rng.normal(0.0, 1.0 / math.sqrt(2 * dim), (2 * dim, dim)),
            phi_b=np.zeros(dim),
            query_code=rng.normal(0.0, 1.0, dim),
            cls_w=rng.normal(0.0, s, (dim, n_classes)),
            cls_b=np.zeros(n_classes),
        )

    def named(self) -> dict[str, np.ndarray]:
        return {
            "tok_emb": self.tok_emb,
            "pos_emb": self.pos_emb,
            "attn_q": self.attn_q,
            "attn_k": self.attn_k,
            "attn_v": self.attn_v,
            "attn_o": self.attn_o,
            "ff": self.ff,
            "phi_w": self.phi_w,
            "phi_b": self.phi_b,
            "query_code": self.query_code,
            "cls_w": self.cls_w,
            "cls_b": self.cls_b,
        }

    def leaves(self) -> dict[str, Node]:
        return {k: ad.leaf(v) for k, v in self.named().items()}

    def copy(self) -> "ModelParams":
        return replace(self, **{k: v.copy() for k, v in self.named().items()})


def encode_instance(leaves: dict[str, Node], inst: Instance) -> EncodedInstance:
    """Differentiable encoding of one instance (Node-valued).

    Must stay arithmetically in lockstep with :func:`encode_instance_arrays`.
    """
    inst.validate()
    n = len(inst.token_ids)
    max_len = leaves["pos_emb"].value.shape[0]
    if n > max_len:
        raise DatasetError(f"instance {inst.uid}: {n} tokens exceeds max length {max_len}")
    dim = leaves["tok_emb"].value.shape[1]

    x = ad.add(
        ad.gather_rows(leaves["tok_emb"], inst.token_ids),
        ad.slice_rows(leaves["pos_emb"], 0, n),
    )
    q = ad.matmul(x, leaves["attn_q"])
    k = ad.matmul(x, leaves["attn_k"])
    v = ad.matmul(x, leaves["attn_v"])
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dim))
    attn = ad.matmul(ad.matmul(ad.softmax(scores), v), leaves["attn_o"])
    z = ad.add(x, attn)
    hidden = ad.add(z, ad.tanh(ad.matmul(z, leaves["ff"])))

    bh, eh = inst.head_span
    bt, et = inst.tail_span
    head = ad.max_pool_rows(hidden, bh, eh)
    tail = ad.max_pool_rows(hidden, bt, et)
    anchors = ad.concat([ad.select_row(hidden, bh - 1), ad.select_row(hidden, bt - 1)])
    context = ad.tanh(ad.add(ad.matmul(anchors, leaves["phi_w"]), leaves["phi_b"]))
    return EncodedInstance(hidden=hidden, context=context, head=head, tail=tail)


def encode_instance_arrays(params: ModelParams, inst: Instance) -> EncodedInstance:
    """Plain-numpy forward identical bit-for-bit to :func:`encode_instance`."""
    inst.validate()
    n = len(inst.token_ids)
    if n > params.max_len:
        raise DatasetError(f"instance {inst.uid}: {n} tokens exceeds max length {params.max_len}")
    idx = np.asarray(inst.token_ids, dtype=np.intp)

    x = params.tok_emb[idx] + params.pos_emb[0:n].copy()
    q = x @ params.attn_q
    k = x @ params.attn_k
    v = x @ params.attn_v
    scores = (q @ k.T.copy()) * (1.0 / math.sqrt(params.dim))
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=-1, keepdims=True)
    attn = (a @ v) @ params.attn_o
    zres = x + attn
    hidden = zres + np.tanh(zres @ params.ff)

    bh, eh = inst.head_span
    bt, et = inst.tail_span
    head = hidden[bh : eh + 1].max(axis=0)
    tail = hidden[bt : et + 1].max(axis=0)
    anchors = np.concatenate([hidden[bh - 1].copy(), hidden[bt - 1].copy()])
    context = np.tanh(anchors @ params.phi_w + params.phi_b)
    return EncodedInstance(hidden=hidden, context=context, head=head, tail=tail)


def build_entity_description(
    desc: RelationDescription, side: Literal["head", "tail"], mode: DescriptionMode
) -> list[str]:
    """Construct an entity description token sequence from hypernym data.

    ``keyword`` emits the hypernym keywords, ``synonyms`` appends the synonym
    list comma-separated, and ``template`` fills the fixed slot template
    "the head/tail entity types including ..." with the synonyms sequence.
    """
    if side == "head":
        keywords, synonyms = desc.head_keywords, desc.head_synonyms
    elif side == "tail":
        keywords, synonyms = desc.tail_keywords, desc.tail_synonyms
    else:
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    if not keywords:
        raise DatasetError(f"relation {desc.name!r}: empty {side} keyword list")

    def comma_join(words: list[str]) -> list[str]:
        out: list[str] = []
        for i, w in enumerate(words):
            if i:
                out.append(",")
            out.append(w)
        return out

    if mode == "keyword":
        return comma_join(keywords)
    if mode == "synonyms":
        return comma_join(keywords + synonyms)
    if mode == "template":
        return ["the", side, "entity", "types", "including"] + comma_join(keywords + synonyms)
    raise ValueError(f"unknown description mode {mode!r}")


def detokenize(tokens: Sequence[str]) -> str:
    """Human-readable form: commas attach to the preceding word."""
    return " ".join(tokens).replace(" ,", ",")


@dataclass
class FrozenEncoder:
    """Fixed random mean-pool encoder for descriptions.

    ``invocations`` counts raw (uncached) encodings so tests can assert the
    once-per-unique-text caching contract.
    """

    emb: np.ndarray
    lin: np.ndarray
    invocations: int = 0

    @classmethod
    def init(cls, vocab_size: int, dim: int, seed: int) -> "FrozenEncoder":
        rng = np.random.default_rng(seed)
        return cls(
            emb=rng.normal(0.0, 1.0, (vocab_size, dim)),
            lin=rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim)),
        )

    def encode_ids(self, token_ids: Sequence[int]) -> np.ndarray:
        if not len(token_ids):
            raise DatasetError("frozen encoder: empty token sequence")
        self.invocations += 1
        mean = self.emb[np.asarray(token_ids, dtype=np.intp)].mean(axis=0)
        return np.tanh(mean @ self.lin)


class DescriptionCache:
    """Read-shared memo table: one frozen encoding per unique token sequence."""

    def __init__(self, frozen: FrozenEncoder, vocab: Vocabulary):
        self.frozen = frozen
        self.vocab = vocab
        self._table: dict[tuple[str, ...], np.ndarray] = {}

    def vector(self, tokens: Sequence[str]) -> np.ndarray:
        key = tuple(tokens)
        hit = self._table.get(key)
        if hit is None:
            hit = self.frozen.encode_ids(self.vocab.encode(tokens))
            self._table[key] = hit
        return hit


def encode_description(
    frozen: FrozenEncoder,
    desc: RelationDescription,
    mode: DescriptionMode,
    vocab: Vocabulary,
    cache: DescriptionCache | None = None,
) -> EncodedDescription:
    """Encode the description text and both entity descriptions."""
    desc.validate()
    if cache is not None:
        vec = cache.vector
    else:
        vec = lambda tokens: frozen.encode_ids(vocab.encode(tokens))
    return EncodedDescription(
        context=vec(desc.description),
        head=vec(build_entity_description(desc, "head", mode)),
        tail=vec(build_entity_description(desc, "tail", mode)),
    )
