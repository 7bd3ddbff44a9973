"""Token sequences: task-conditioned BOS, attribute chain, semantic-ID codes.

A :class:`SequenceSpace` pins the per-position vocabularies of the
decoding path (m attribute steps followed by L code layers) plus the
(objective, scene) BOS registry, and assigns every token a global index
in one unified space so hash functions over token pairs are well defined
across heterogeneous vocabularies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import OBJECTIVES, SCENES


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TaskContext:
    objective: str
    scene: str


@dataclass(frozen=True)
class TokenSequence:
    """One decoding path: [task BOS, attribute tokens, SID tokens]."""

    bos: int
    attrs: tuple
    sids: tuple

    def __len__(self):
        return 1 + len(self.attrs) + len(self.sids)

    @property
    def path(self) -> tuple:
        """Decoded tokens only (no BOS) — the trie / scorer path."""
        return self.attrs + self.sids


@dataclass
class SequenceSpace:
    """Per-position vocabularies for the m+L decoding steps.

    step t in 1..m are attribute positions (chain order), steps m+1..m+L
    are SID layers.  Global token indices: task tokens first, then each
    step's vocabulary in order.
    """

    attr_chain: tuple  # field names, e.g. ("l2", "l3")
    attr_vocabs: dict  # field -> {identifier: local index}
    sid_sizes: tuple  # K per layer
    objectives: tuple = OBJECTIVES
    scenes: tuple = SCENES
    step_offsets: tuple = field(init=False)

    def __post_init__(self):
        for f in self.attr_chain:
            if f not in self.attr_vocabs:
                raise TokenizerError(f"no vocabulary for attribute field {f!r}")
        offsets = []
        base = len(self.objectives) * len(self.scenes)
        for t in range(1, self.n_steps + 1):
            offsets.append(base)
            base += self.step_vocab_size(t)
        self.step_offsets = tuple(offsets)

    @property
    def m(self) -> int:
        return len(self.attr_chain)

    @property
    def n_layers(self) -> int:
        return len(self.sid_sizes)

    @property
    def n_steps(self) -> int:
        return self.m + self.n_layers

    @property
    def n_task_tokens(self) -> int:
        return len(self.objectives) * len(self.scenes)

    def step_vocab_size(self, t: int) -> int:
        if not 1 <= t <= self.n_steps:
            raise TokenizerError(f"step {t} out of range 1..{self.n_steps}")
        if t <= self.m:
            return len(self.attr_vocabs[self.attr_chain[t - 1]])
        return self.sid_sizes[t - self.m - 1]

    def step_name(self, t: int) -> str:
        if t <= self.m:
            return self.attr_chain[t - 1]
        return f"s{t - self.m - 1}"

    def global_index(self, t: int, local: int) -> int:
        if not 0 <= local < self.step_vocab_size(t):
            raise TokenizerError(f"token {local} out of range at step {t}")
        return self.step_offsets[t - 1] + local

    def as_dict(self) -> dict:
        return {
            "attr_chain": list(self.attr_chain),
            "attr_vocabs": {f: dict(v) for f, v in self.attr_vocabs.items()},
            "sid_sizes": list(self.sid_sizes),
            "objectives": list(self.objectives),
            "scenes": list(self.scenes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceSpace":
        return cls(
            attr_chain=tuple(d["attr_chain"]),
            attr_vocabs={f: dict(v) for f, v in d["attr_vocabs"].items()},
            sid_sizes=tuple(d["sid_sizes"]),
            objectives=tuple(d["objectives"]),
            scenes=tuple(d["scenes"]),
        )


def task_bos_token(ctx: TaskContext, space: SequenceSpace) -> int:
    """Unique token per registered (objective, scene) pair."""
    if ctx.objective not in space.objectives:
        raise TokenizerError(f"unregistered objective {ctx.objective!r}")
    if ctx.scene not in space.scenes:
        raise TokenizerError(f"unregistered scene {ctx.scene!r}")
    return space.objectives.index(ctx.objective) * len(space.scenes) + space.scenes.index(
        ctx.scene
    )


def build_sequence(item, sid, ctx: TaskContext, space: SequenceSpace) -> TokenSequence:
    """[task BOS, attribute tokens in chain order, SID codes]."""
    bos = task_bos_token(ctx, space)
    attrs = []
    for f in space.attr_chain:
        if f not in item.attrs:
            raise TokenizerError(f"item {item.item_id} has no attribute {f!r}")
        value = item.attrs[f]
        vocab = space.attr_vocabs[f]
        if value not in vocab:
            raise TokenizerError(f"attribute value {value!r} not in vocabulary for {f!r}")
        attrs.append(vocab[value])
    if len(sid.codes) != space.n_layers:
        raise TokenizerError(
            f"sid has {len(sid.codes)} layers, space expects {space.n_layers}"
        )
    for l, c in enumerate(sid.codes):
        if not 0 <= c < space.sid_sizes[l]:
            raise TokenizerError(f"sid code {c} out of range at layer {l}")
    return TokenSequence(bos=bos, attrs=tuple(attrs), sids=tuple(sid.codes))


# ----------------------------------------------------------------------
# hash-based content summaries over decoded token pairs
# ----------------------------------------------------------------------

def _integer_root(x: int, k: int) -> int:
    """Exact floor(x ** (1/k)) by integer arithmetic."""
    if x < 0 or k < 1:
        raise ValueError("x must be >= 0 and k >= 1")
    if x == 0:
        return 0
    r = int(round(x ** (1.0 / k)))
    while r > 0 and r**k > x:
        r -= 1
    while (r + 1) ** k <= x:
        r += 1
    return r


def hash_table_size(vocab_sizes) -> int:
    """floor((prod V_i) ** (2 / (n+1))) for an n-way product, computed exactly.

    Evaluated as the integer (n+1)-th root of (prod V_i)^2 so the floor is
    never ambiguous regardless of magnitude.
    """
    sizes = [int(v) for v in vocab_sizes]
    if not sizes:
        raise ValueError("vocab_sizes must be non-empty")
    if any(v < 1 for v in sizes):
        raise ValueError("vocab sizes must be >= 1")
    prod = math.prod(sizes)
    return _integer_root(prod * prod, len(sizes) + 1)


@dataclass(frozen=True)
class HashSpec:
    """Pairwise token-combination hashing into a shared embedding table.

    ``pairs`` are (position_x, position_y) decoding steps (1-based); each
    pair hashes with the family H1=x+y, H2=x*y, H3=p1*x+p2*y modulo its
    own table size.  Row table_rows-1 is the reserved NULL row for pairs
    whose positions are not yet decoded.
    """

    pairs: tuple  # of (step_x, step_y)
    pair_sizes: tuple  # modulus per pair
    m_hashes: int = 3
    p1: int = 31
    p2: int = 37
    d_hash: int = 16

    def __post_init__(self):
        if not 1 <= self.m_hashes <= 3:
            raise ValueError("m_hashes must lie in 1..3 (fixed hash family)")
        if len(self.pairs) != len(self.pair_sizes):
            raise ValueError("need one table size per pair")
        if any(s < 1 for s in self.pair_sizes):
            raise ValueError("pair table sizes must be >= 1")
        if self.p1 == self.p2:
            raise ValueError("p1 and p2 must differ")

    @property
    def table_rows(self) -> int:
        return max(self.pair_sizes) + 1

    @property
    def null_row(self) -> int:
        return self.table_rows - 1

    @property
    def output_dim(self) -> int:
        return self.m_hashes * len(self.pairs) * self.d_hash


DEFAULT_PAIR_LAYERS = (0, 1)  # SID layers crossed with each attribute position


def default_hash_pairs(space: SequenceSpace):
    """Cross every attribute position with the first two SID layers, plus (s0, s1)."""
    pairs = []
    for a in range(1, space.m + 1):
        for l in DEFAULT_PAIR_LAYERS:
            if l < space.n_layers:
                pairs.append((a, space.m + 1 + l))
    if space.n_layers >= 2:
        pairs.append((space.m + 1, space.m + 2))
    if not pairs:  # single-layer, no attributes: degenerate self-pair
        pairs.append((1, 1))
    return tuple(pairs)


def hash_spec_for_space(space: SequenceSpace, pairs=None, m_hashes=3, p1=31, p2=37,
                        d_hash=16) -> HashSpec:
    pairs = tuple(pairs) if pairs is not None else default_hash_pairs(space)
    sizes = tuple(
        hash_table_size([space.step_vocab_size(x), space.step_vocab_size(y)])
        for x, y in pairs
    )
    return HashSpec(pairs=pairs, pair_sizes=sizes, m_hashes=m_hashes, p1=p1, p2=p2,
                    d_hash=d_hash)


def hash_rows(spec: HashSpec, pair_index: int, x: int, y: int):
    """Row indices of the m_hashes lookups for global token indices (x, y)."""
    s = spec.pair_sizes[pair_index]
    family = (x + y, x * y, spec.p1 * x + spec.p2 * y)
    return [h % s for h in family[: spec.m_hashes]]


def content_summary(prefix_globals, spec: HashSpec, table: np.ndarray) -> np.ndarray:
    """Concatenated hashed-pair embeddings for a partially decoded path.

    ``prefix_globals`` maps decoding step -> global token index, with None
    (or absence) for steps not yet decoded; both positions of a pair must
    be decoded for a real lookup, otherwise the NULL row is used for all
    hashes of that pair.  Output length is fixed by the spec regardless of
    how much of the path is decoded.
    """
    if table.shape != (spec.table_rows, spec.d_hash):
        raise ValueError(
            f"table shape {table.shape} does not match spec "
            f"({spec.table_rows}, {spec.d_hash})"
        )
    rows = content_summary_rows(prefix_globals, spec)
    return table[rows].reshape(-1)


def content_summary_rows(prefix_globals, spec: HashSpec) -> list:
    """Row indices (length m_hashes * n_pairs) backing :func:`content_summary`."""
    if not isinstance(prefix_globals, dict):
        prefix_globals = {t + 1: g for t, g in enumerate(prefix_globals)}
    rows = []
    for j, (px, py) in enumerate(spec.pairs):
        x = prefix_globals.get(px)
        y = prefix_globals.get(py)
        if x is None or y is None:
            rows.extend([spec.null_row] * spec.m_hashes)
        else:
            rows.extend(hash_rows(spec, j, int(x), int(y)))
    return rows
